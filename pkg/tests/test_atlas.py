import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from atlasseg.atlas import (
    ProbabilisticAtlas,
    argmax_probabilities,
    build_atlas,
    build_mean_template,
    case_seeds,
    fuse_average,
    fuse_majority,
    propagate_labels,
    segment,
    warp_probabilities,
)
from atlasseg.errors import AlignmentError, CaseError, NumericalError, PairingError, SettingsError
from atlasseg.metrics import dice
from atlasseg.phantom import PhantomSpec, generate_phantom
from atlasseg.registration import AffineTransform, IdentityTransform, RegistrationSettings, RigidTransform
from atlasseg.volume import Geometry, LabelVolume, Volume, resample

FAST = RegistrationSettings(iterations=(20, 10, 5))


def votes(*columns):
    """One LabelVolume per rater from per-voxel vote lists (voxels along x)."""
    g = Geometry((len(columns), 1, 1))
    return [LabelVolume(g, np.array(v, dtype=np.uint8)) for v in zip(*columns)]


class TestPropagate:
    def test_identity(self):
        lab = LabelVolume(Geometry((5, 4, 3)), np.random.default_rng(0).integers(0, 4, (5, 4, 3)))
        assert np.array_equal(propagate_labels(lab, IdentityTransform(), lab.geometry).data, lab.data)

    def test_integer_shift(self):
        lab = LabelVolume(Geometry((5, 4, 3)), np.random.default_rng(1).integers(1, 4, (5, 4, 3)))
        out = propagate_labels(lab, AffineTransform(translation=(0, 1, 0)), lab.geometry).data
        assert np.array_equal(out[:, :-1], lab.data[:, 1:]) and not out[:, -1].any()

    def test_random_rigid_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        lab = LabelVolume(Geometry((8, 8, 8)), rng.integers(0, 4, (8, 8, 8)))
        t = RigidTransform(rng.uniform(-0.4, 0.4, 3), rng.uniform(-1.5, 1.5, 3), lab.geometry.center())
        out = propagate_labels(lab, t, lab.geometry)
        assert np.array_equal(out.data, oracles.resample_loop(lab.data, lab.geometry, lab.geometry, t, "nearest"))

    def test_source_geometry_checked(self):
        lab = LabelVolume(Geometry((4, 4, 4)), np.zeros((4, 4, 4)))
        with pytest.raises(PairingError):
            propagate_labels(lab, None, lab.geometry, Geometry((4, 4, 4), (2, 2, 2)))


class TestTemplate:
    def test_constants(self):
        g = Geometry((3, 3, 3))
        out = build_mean_template([Volume(g, np.full(g.dims, 2.0)), Volume(g, np.full(g.dims, 4.0))])
        assert np.all(out.data == 3.0)

    def test_single(self):
        v = Volume(Geometry((3, 4, 5)), np.random.default_rng(0).random((3, 4, 5)))
        assert np.array_equal(build_mean_template([v]).data, v.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        g = Geometry((4, 4, 4))
        # unit-range values: the template is float32, so 1e-6 is only meaningful near 1
        vols = [Volume(g, rng.random(g.dims)) for _ in range(5)]
        ref = oracles.mean_loop([v.data for v in vols])
        assert np.abs(build_mean_template(vols).data - ref).max() < 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(2)
        g = Geometry((4, 4, 4))
        xs = [rng.random(g.dims) for _ in range(4)]
        a = 2.5
        scaled = build_mean_template([Volume(g, a * x) for x in xs]).data
        assert np.allclose(scaled, a * build_mean_template([Volume(g, x) for x in xs]).data, rtol=1e-6)

    def test_alignment_error(self):
        with pytest.raises(AlignmentError):
            build_mean_template([Volume(Geometry((2, 2, 2)), np.zeros((2, 2, 2))),
                                 Volume(Geometry((2, 2, 2), (2, 2, 2)), np.zeros((2, 2, 2)))])


class TestFusion:
    def test_majority_examples(self):
        out = [fuse_majority(votes(v)).data[0, 0, 0] for v in ([1, 1, 2], [1, 2], [0, 3, 3])]
        assert out == [1, 1, 3]

    def test_average_examples(self):
        p = fuse_average(votes([1, 1, 2, 3]))
        assert [m.data[0, 0, 0] for m in p] == [0.0, 0.5, 0.25, 0.25]
        p = fuse_average(votes([2, 2]))
        assert [m.data[0, 0, 0] for m in p] == [0.0, 0.0, 1.0, 0.0]

    def test_random_vote_sets_cross_oracle(self):
        rng = np.random.default_rng(0)
        g = Geometry((10, 10, 1))
        for _ in range(100):
            labs = [LabelVolume(g, rng.integers(0, 4, g.dims)) for _ in range(rng.integers(1, 8))]
            assert np.array_equal(argmax_probabilities(fuse_average(labs)), fuse_majority(labs).data)

    def test_exhaustive_multisets(self):
        combos = [c for n in range(1, 6) for c in itertools.combinations_with_replacement(range(4), n)]
        for n in range(1, 6):
            cols = [c for c in combos if len(c) == n]
            labs = votes(*cols)
            maj = fuse_majority(labs).data[:, 0, 0]
            avg = argmax_probabilities(fuse_average(labs))[:, 0, 0]
            assert np.array_equal(maj, avg)
            expect = [min(set(c), key=lambda k: (-c.count(k), k)) for c in cols]
            assert maj.tolist() == expect

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_permutation_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        g = Geometry((4, 4, 4))
        labs = [LabelVolume(g, rng.integers(0, 4, g.dims)) for _ in range(n)]
        perm = [labs[i] for i in rng.permutation(n)]
        assert np.array_equal(fuse_majority(labs).data, fuse_majority(perm).data)

    def test_maps_are_a_partition_of_unity(self):
        rng = np.random.default_rng(3)
        g = Geometry((5, 5, 5))
        p = np.stack([m.data for m in fuse_average([LabelVolume(g, rng.integers(0, 4, g.dims)) for _ in range(3)])])
        assert p.min() >= 0 and np.all(p.sum(axis=0) == 1.0)

    def test_geometry_mismatch(self):
        a = LabelVolume(Geometry((2, 2, 2)), np.zeros((2, 2, 2)))
        b = LabelVolume(Geometry((2, 2, 2), origin=(1, 0, 0)), np.zeros((2, 2, 2)))
        for fn in (fuse_majority, fuse_average):
            with pytest.raises(AlignmentError):
                fn([a, b])


class TestAtlasObject:
    def test_simplex_check(self):
        g = Geometry((2, 2, 2))
        z, o = np.zeros(g.dims), np.ones(g.dims)
        maps = [Volume(g, o), Volume(g, o), Volume(g, z), Volume(g, z)]
        atlas = ProbabilisticAtlas(Volume(g, o), maps, LabelVolume(g, z))
        with pytest.raises(NumericalError):
            atlas.check()

    def test_needs_four_maps(self):
        g = Geometry((2, 2, 2))
        with pytest.raises(SettingsError):
            ProbabilisticAtlas(Volume(g, np.ones(g.dims)), [], LabelVolume(g, np.zeros(g.dims)))


@pytest.fixture(scope="module")
def rigid_trio():
    img, lab = generate_phantom(PhantomSpec(noise_sigma=4, seed=3))
    c = img.geometry.center()
    pairs = [(img, lab)]
    for ang, t in (((4.0, -3.0, 2.0), (2.0, -1.0, 1.5)), ((-3.0, 2.0, 5.0), (-1.5, 2.0, -2.0))):
        tr = RigidTransform(np.deg2rad(ang), t, c)
        pairs.append((resample(img, tr, img.geometry), resample(lab, tr, img.geometry, "nearest")))
    atlas = build_atlas(pairs, "rigid", FAST, seed=7, ids=["a", "b", "c"])
    return pairs, atlas


class TestBuild:
    def test_duplicates_give_one_hot_maps(self, small_phantom):
        img, lab = small_phantom
        atlas = build_atlas([(img, lab), (img, lab)], "rigid", FAST, seed=0)
        p = np.stack([m.data for m in atlas.prob_maps])
        assert np.all((p == 0) | (p == 1))
        assert np.abs(atlas.template.data - img.data).max() < 0.05 * img.data.max()

    def test_known_rigid_trio(self, rigid_trio):
        pairs, atlas = rigid_trio
        ref_lab = pairs[atlas.provenance["reference_index"]][1]
        for c in (1, 2, 3):
            assert dice(atlas.majority, ref_lab, c) >= 0.95

    def test_provenance(self, rigid_trio):
        _, atlas = rigid_trio
        prov = atlas.provenance
        assert prov["n_cases"] == 3 and prov["cases"] == ["a", "b", "c"]
        assert prov["reference_id"] == prov["cases"][prov["reference_index"]]
        assert prov["transforms"][prov["reference_id"]]["type"] == "identity"
        assert prov["mode"] == "rigid" and len(prov["case_seeds"]) == 3

    def test_invariants(self, rigid_trio):
        _, atlas = rigid_trio
        atlas.check()
        assert np.array_equal(argmax_probabilities(atlas.prob_maps), atlas.majority.data)

    def test_save_load(self, rigid_trio, tmp_path):
        _, atlas = rigid_trio
        atlas.save(tmp_path / "atlas")
        names = sorted(p.name for p in (tmp_path / "atlas").iterdir())
        assert names == ["majority.nii.gz", "prob_bg.nii.gz", "prob_csf.nii.gz", "prob_gm.nii.gz",
                         "prob_wm.nii.gz", "provenance.json", "template.nii.gz"]
        back = ProbabilisticAtlas.load(tmp_path / "atlas")
        assert np.array_equal(back.majority.data, atlas.majority.data)
        assert np.array_equal(back.template.data, atlas.template.data)
        assert back.provenance == atlas.provenance

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ProbabilisticAtlas.load(tmp_path)

    def test_needs_two(self, small_phantom):
        with pytest.raises(SettingsError):
            build_atlas([small_phantom])

    def test_pairing_error_names_case(self, small_phantom):
        img, lab = small_phantom
        bad = LabelVolume(Geometry(lab.dims, (1, 1, 1)), lab.data)
        with pytest.raises(CaseError, match="second"):
            build_atlas([(img, lab), (img, bad)], ids=["first", "second"])

    def test_worker_count_does_not_matter(self, small_phantom):
        img, lab = small_phantom
        other, olab = generate_phantom(PhantomSpec(dims=(32, 32, 32), spacing=(2, 2, 2), noise_sigma=3, seed=4,
                                                   center_offset=(2, -1, 1)))
        third, tlab = generate_phantom(PhantomSpec(dims=(32, 32, 32), spacing=(2, 2, 2), noise_sigma=3, seed=5,
                                                   rotation_deg=(3, 0, -2)))
        pairs = [(img, lab), (other, olab), (third, tlab)]
        a = build_atlas(pairs, "affine", FAST, seed=1, workers=1)
        b = build_atlas(pairs, "affine", FAST, seed=1, workers=3)
        assert a.provenance == b.provenance
        assert np.array_equal(a.template.data, b.template.data)

    def test_case_seeds_are_stable(self):
        assert case_seeds(3, 4) == case_seeds(3, 4)
        assert case_seeds(3, 5)[:4] == case_seeds(3, 4)
        assert len(set(case_seeds(3, 10))) == 10


class TestSegment:
    def test_identity_path(self, rigid_trio):
        _, atlas = rigid_trio
        out = segment(atlas, atlas.template, transform=IdentityTransform())
        ref = argmax_probabilities(atlas.prob_maps)
        ref[atlas.template.data <= 0] = 0
        assert np.array_equal(out.data, ref)

    def test_mask_rule(self, rigid_trio):
        _, atlas = rigid_trio
        data = atlas.template.data.copy()
        data[20:40, 20:40, 30] = 0  # hole inside the head
        out = segment(atlas, Volume(atlas.geometry, data), transform=IdentityTransform(), fusion="majority")
        assert np.array_equal(out.data == 0, (data <= 0) | (atlas.majority.data == 0))
        assert not out.data[20:40, 20:40, 30].any()

    def test_registered_phantom_target(self, rigid_trio):
        pairs, atlas = rigid_trio
        target, truth = generate_phantom(PhantomSpec(noise_sigma=4, seed=9, rotation_deg=(2, -2, 3),
                                                     center_offset=(1, 2, -1)))
        out = segment(atlas, target, "rigid", FAST, seed=0)
        assert set(np.unique(out.data)) <= {0, 1, 2, 3}
        for c in (1, 2, 3):
            assert dice(out, truth, c) >= 0.90

    def test_warp_renormalises(self, rigid_trio):
        _, atlas = rigid_trio
        t = RigidTransform(np.deg2rad([5, 0, 3]), (0.3, 0.7, -0.2), atlas.geometry.center())
        p = warp_probabilities(atlas, t, atlas.geometry)
        assert np.abs(p.sum(axis=0) - 1).max() < 1e-12 and p.min() >= 0

    def test_unknown_fusion(self, rigid_trio):
        _, atlas = rigid_trio
        with pytest.raises(SettingsError):
            segment(atlas, atlas.template, fusion="vote")
