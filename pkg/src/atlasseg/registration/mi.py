"""Mutual information with partial-volume (linear) joint-histogram binning."""

from __future__ import annotations

import numpy as np

from ..errors import NoOverlapError, SettingsError
from ..volume import Volume, interpolate_trilinear, interpolate_trilinear_with_gradient


def bin_positions(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Continuous bin coordinate in ``[0, bins - 1]``; a constant range maps to bin 0."""
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return np.clip((values - lo) * ((bins - 1) / (hi - lo)), 0.0, bins - 1)


def _split(pos: np.ndarray, bins: int):
    i0 = np.minimum(np.floor(pos).astype(np.int64), bins - 2)
    return i0, pos - i0


def joint_histogram(fpos: np.ndarray, mpos: np.ndarray, bins: int) -> np.ndarray:
    """Partial-volume joint histogram from continuous bin coordinates (fixed rows, moving columns)."""
    fi, fw = _split(fpos, bins)
    mi_, mw = _split(mpos, bins)
    size = bins * bins
    h = np.bincount(fi * bins + mi_, (1 - fw) * (1 - mw), size)
    h += np.bincount(fi * bins + mi_ + 1, (1 - fw) * mw, size)
    h += np.bincount((fi + 1) * bins + mi_, fw * (1 - mw), size)
    h += np.bincount((fi + 1) * bins + mi_ + 1, fw * mw, size)
    return h.reshape(bins, bins)


def mi_from_histogram(h: np.ndarray) -> float:
    total = h.sum()
    if total <= 0:
        raise NoOverlapError("empty joint histogram")
    p = h / total
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    nz = p > 0
    outer = pf[:, None] * pm[None, :]
    return float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))


def mi_gradient_wrt_moving_bin(fpos, mpos, h, bins) -> np.ndarray:
    """d MI / d (moving bin coordinate) for every sample."""
    total = h.sum()
    p = h / total
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(p + 1e-12) - np.log(pf[:, None] * pm[None, :] + 1e-12)
    fi, fw = _split(fpos, bins)
    mi_, _ = _split(mpos, bins)
    d0 = log_ratio[fi, mi_ + 1] - log_ratio[fi, mi_]
    d1 = log_ratio[fi + 1, mi_ + 1] - log_ratio[fi + 1, mi_]
    return ((1 - fw) * d0 + fw * d1) / total


class MIEvaluator:
    """Evaluates MI between fixed samples and a moving image under a transform.

    Intensity ranges for binning are taken from the full fixed and moving
    arrays so values stay comparable across sample subsets.
    """

    def __init__(self, fixed_data: np.ndarray, moving: Volume | np.ndarray, moving_geometry=None,
                 bins: int = 32):
        if bins < 2:
            raise SettingsError("MI needs at least 2 bins")
        self.bins = bins
        if isinstance(moving, Volume):
            moving_geometry = moving.geometry
            moving = moving.data
        self.moving = np.ascontiguousarray(moving, dtype=np.float64)
        self.geometry = moving_geometry
        fixed_data = np.asarray(fixed_data)
        self.frange = (float(fixed_data.min()), float(fixed_data.max()))
        self.mrange = (float(self.moving.min()), float(self.moving.max()))

    def _overlap(self, points):
        idx = self.geometry.world_to_indices(points)
        dims = np.asarray(self.moving.shape)
        inside = np.all((idx >= -1e-6) & (idx <= dims - 1 + 1e-6), axis=1)
        if np.count_nonzero(inside) < 2:
            raise NoOverlapError("fewer than 2 samples overlap the moving image")
        return inside, idx[inside]

    def value(self, fvals: np.ndarray, points: np.ndarray) -> float:
        inside, idx = self._overlap(points)
        mvals = interpolate_trilinear(self.moving, idx)
        fpos = bin_positions(fvals[inside], *self.frange, self.bins)
        mpos = bin_positions(mvals, *self.mrange, self.bins)
        return mi_from_histogram(joint_histogram(fpos, mpos, self.bins))

    def value_and_point_gradient(self, fvals, points):
        """MI and its gradient w.r.t. each sample's moving-space world position (zero outside overlap)."""
        inside, idx = self._overlap(points)
        mvals, gidx = interpolate_trilinear_with_gradient(self.moving, idx)
        fpos = bin_positions(fvals[inside], *self.frange, self.bins)
        mpos = bin_positions(mvals, *self.mrange, self.bins)
        h = joint_histogram(fpos, mpos, self.bins)
        value = mi_from_histogram(h)
        dv = mi_gradient_wrt_moving_bin(fpos, mpos, h, self.bins)
        lo, hi = self.mrange
        scale = (self.bins - 1) / (hi - lo) if hi > lo else 0.0
        gworld = (gidx / np.asarray(self.geometry.spacing)) @ self.geometry.direction.T
        grad = np.zeros((points.shape[0], 3))
        grad[inside] = (dv * scale)[:, None] * gworld
        return value, grad


def mutual_information(fixed: Volume, moving: Volume, transform=None, bins: int = 32, mask=None) -> float:
    """MI (nats) between ``fixed`` and ``moving`` resampled through ``transform``.

    Only fixed voxels whose mapped position falls inside the moving grid (and
    inside ``mask`` when given) contribute.
    """
    if bins < 2:
        raise SettingsError("MI needs at least 2 bins")
    fvals = fixed.flat().astype(np.float64)
    points = fixed.geometry.world_points()
    if mask is not None:
        m = np.asarray(getattr(mask, "data", mask)).ravel(order="F") != 0
        fvals, points = fvals[m], points[m]
    if transform is not None:
        points = transform.apply(points)
    ev = MIEvaluator(fixed.data, moving, bins=bins)
    return ev.value(fvals, points)
