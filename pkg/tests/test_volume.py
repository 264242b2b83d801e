import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from atlasseg.errors import BoundsError, GeometryError, InterpolationError, LabelDomainError
from atlasseg.registration import AffineTransform, RigidTransform
from atlasseg.volume import (
    Geometry,
    LabelVolume,
    Volume,
    nearest_sample,
    resample,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)
from conftest import random_rotation

ROT_Z90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class TestGeometry:
    def test_voxel_to_world_identity(self):
        assert np.allclose(voxel_to_world(Geometry((5, 5, 5)), (2, 3, 4)), [2, 3, 4])

    def test_voxel_to_world_origin_and_spacing(self):
        g = Geometry((4, 4, 4), (2, 2, 2), (10, 0, 0))
        assert np.allclose(voxel_to_world(g, (1, 0, 0)), [12, 0, 0])

    def test_voxel_to_world_rotated(self):
        g = Geometry((3, 3, 3), direction=ROT_Z90)
        assert np.allclose(voxel_to_world(g, (1, 0, 0)), [0, 1, 0])

    @pytest.mark.parametrize("index", [(-1, 0, 0), (0, 5, 0), (0, 0, 9)])
    def test_out_of_bounds(self, index):
        with pytest.raises(BoundsError):
            voxel_to_world(Geometry((5, 5, 5)), index)

    def test_rejects_bad_geometry(self):
        with pytest.raises(GeometryError):
            Geometry((0, 4, 4))
        with pytest.raises(GeometryError):
            Geometry((4, 4, 4), (1, 0, 1))
        with pytest.raises(GeometryError):
            Geometry((4, 4, 4), direction=[[1, 0.1, 0], [0, 1, 0], [0, 0, 1]])

    def test_direction_tolerance(self):
        d = np.eye(3)
        d[0, 1] = 5e-7
        Geometry((2, 2, 2), direction=d)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_world_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        g = Geometry((7, 5, 6), rng.uniform(0.3, 3, 3), rng.uniform(-50, 50, 3), random_rotation(rng))
        for idx in np.ndindex(*g.dims):
            back = world_to_voxel(g, voxel_to_world(g, idx))
            assert np.abs(back - idx).max() < 1e-9


class TestData:
    def test_volume_requires_finite(self):
        with pytest.raises(GeometryError):
            Volume(Geometry((2, 2, 2)), np.full((2, 2, 2), np.nan))

    def test_shape_checked(self):
        with pytest.raises(GeometryError):
            Volume(Geometry((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_flat_order_is_x_fastest(self):
        g = Geometry((2, 3, 4))
        v = Volume(g, np.arange(24, dtype=np.float32))
        assert v.data[1, 0, 0] == 1 and v.data[0, 1, 0] == 2 and v.data[0, 0, 1] == 6
        assert np.array_equal(v.flat(), np.arange(24))

    def test_label_domain(self):
        with pytest.raises(LabelDomainError):
            LabelVolume(Geometry((2, 2, 2)), np.full((2, 2, 2), 4))

    def test_immutable(self):
        v = Volume(Geometry((2, 2, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1


class TestSampling:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.g = Geometry((4, 5, 6), (1.0, 2.0, 0.5), (3.0, -1.0, 2.0))
        self.vol = Volume(self.g, rng.random((4, 5, 6)) * 10)

    def test_node_value(self):
        p = voxel_to_world(self.g, (2, 3, 4))
        assert trilinear_sample(self.vol, p) == pytest.approx(float(self.vol.data[2, 3, 4]), abs=1e-6)

    def test_midpoint(self):
        g = Geometry((2, 1, 1))
        v = Volume(g, np.array([0.0, 10.0]))
        assert trilinear_sample(v, (0.5, 0, 0)) == pytest.approx(5.0)

    def test_outside_is_background(self):
        assert trilinear_sample(self.vol, (1000, 0, 0)) == 0.0
        assert trilinear_sample(self.vol, (1000, 0, 0), background=-1) == -1

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 4), st.floats(0, 5))
    def test_convex_combination(self, x, y, z):
        val = trilinear_sample(self.vol, self.g.indices_to_world(np.array([[x, y, z]]))[0])
        i, j, k = (min(int(np.floor(c)), n - 2) for c, n in zip((x, y, z), self.g.dims))
        cell = self.vol.data[i:i + 2, j:j + 2, k:k + 2]
        assert cell.min() - 1e-4 <= val <= cell.max() + 1e-4

    def test_nearest_center_and_outside(self):
        lab = LabelVolume(Geometry((3, 1, 1)), np.array([1, 2, 3]))
        assert nearest_sample(lab, (1, 0, 0)) == 2
        assert nearest_sample(lab, (7, 0, 0)) == 0
        assert nearest_sample(lab, (-0.6, 0, 0)) == 0

    def test_nearest_rule_and_tie(self):
        lab = LabelVolume(Geometry((2, 1, 1)), np.array([1, 2]))
        assert nearest_sample(lab, (0.4, 0, 0)) == 1
        assert nearest_sample(lab, (0.6, 0, 0)) == 2
        assert nearest_sample(lab, (0.5, 0, 0)) == 1  # half-way goes to the lower index


class TestResample:
    def test_identity_exact(self):
        rng = np.random.default_rng(0)
        g = Geometry((6, 7, 5), (0.9, 1.2, 2.0), (1, 2, 3), random_rotation(rng))
        v = Volume(g, rng.random(g.dims) * 100)
        lab = LabelVolume(g, rng.integers(0, 4, g.dims))
        assert np.array_equal(resample(v, None, g).data, v.data)
        assert np.array_equal(resample(lab, None, g, "nearest").data, lab.data)
        ident = AffineTransform()
        assert np.array_equal(resample(v, ident, g).data, v.data)

    def test_integer_shift(self):
        rng = np.random.default_rng(1)
        g = Geometry((5, 4, 3))
        v = Volume(g, rng.random(g.dims) + 1)
        out = resample(v, AffineTransform(translation=(1, 0, 0)), g).data
        assert np.array_equal(out[:-1], v.data[1:])
        assert np.all(out[-1] == 0)

    def test_random_affine_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        g = Geometry((10, 10, 10), (1.0, 1.5, 0.8), (-3, 2, 1))
        # unit-range values: output is float32, so 1e-6 is only meaningful near 1
        v = Volume(g, rng.random(g.dims))
        m = np.eye(3) + rng.uniform(-0.15, 0.15, (3, 3))
        t = AffineTransform(m, rng.uniform(-2, 2, 3), g.center())
        out = resample(v, t, g).data
        ref = oracles.resample_loop(v.data, g, g, t)
        assert np.abs(out - ref).max() < 1e-6

    def test_nearest_matches_loop_oracle_and_keeps_label_set(self):
        rng = np.random.default_rng(4)
        g = Geometry((8, 8, 8))
        lab = LabelVolume(g, rng.choice([0, 2, 3], size=g.dims))
        t = RigidTransform(rng.uniform(-0.3, 0.3, 3), rng.uniform(-2, 2, 3), g.center())
        out = resample(lab, t, g, "nearest").data
        assert np.array_equal(out, oracles.resample_loop(lab.data, g, g, t, "nearest"))
        assert set(np.unique(out)) <= {0, 2, 3}

    def test_trilinear_labels_rejected(self):
        lab = LabelVolume(Geometry((2, 2, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(InterpolationError):
            resample(lab, None, lab.geometry, "trilinear")
        with pytest.raises(InterpolationError):
            resample(lab, None, lab.geometry, "cubic")

    def test_resample_onto_other_grid(self):
        g = Geometry((4, 4, 4), (2, 2, 2))
        fine = Geometry((7, 7, 7))
        i, j, k = np.meshgrid(*[np.arange(4)] * 3, indexing="ij")
        v = Volume(g, (2 * i + 3 * j - k).astype(float))
        out = resample(v, None, fine).data
        fi, fj, fk = np.meshgrid(*[np.arange(7)] * 3, indexing="ij")
        assert np.allclose(out, fi + 1.5 * fj - 0.5 * fk, atol=1e-5)
