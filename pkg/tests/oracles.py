"""Independent brute-force reference implementations used as test oracles.

Deliberately naive: explicit loops or pairwise arrays, no shared code with the
package beyond the data model.
"""

import math

import numpy as np


def dice(a, b):
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x) and bool(y)
    return 2.0 * inter / (na + nb)


def hausdorff(a, b, spacing):
    """Symmetric Hausdorff distance via the full pairwise distance matrix."""
    pa = np.argwhere(a)
    pb = np.argwhere(b)
    sp = np.asarray(spacing, dtype=np.float64)
    d = np.sqrt(np.sum(((pa[:, None, :] - pb[None, :, :]) * sp) ** 2, axis=2))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def avd(a, b, voxel_volume):
    vp = int(a.sum()) * voxel_volume
    vg = int(b.sum()) * voxel_volume
    return abs(vp - vg) / vg * 100.0


def trilinear_at(data, c, background=0.0):
    """Scalar trilinear lookup at one continuous index ``c``."""
    dims = data.shape
    for a in range(3):
        if c[a] < 0 or c[a] > dims[a] - 1:
            return background
    base = [min(int(math.floor(c[a])), max(dims[a] - 2, 0)) for a in range(3)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = 1.0
                idx = []
                for a, d in enumerate((dx, dy, dz)):
                    f = c[a] - base[a]
                    w *= f if d else 1.0 - f
                    idx.append(min(base[a] + d, dims[a] - 1))
                total += w * float(data[tuple(idx)])
    return total


def nearest_at(data, c, background=0):
    idx = []
    for a in range(3):
        r = math.ceil(c[a] - 0.5)
        if r < 0 or r >= data.shape[a]:
            return background
        idx.append(r)
    return data[tuple(idx)]


def resample_loop(data, src_geom, ref_geom, transform, kind="trilinear"):
    """Per-voxel pull-back resampling with explicit index arithmetic."""
    out = np.zeros(ref_geom.dims)
    m_ref = ref_geom.index_to_world_matrix()
    m_src_inv = np.linalg.inv(src_geom.index_to_world_matrix())
    for i in range(ref_geom.dims[0]):
        for j in range(ref_geom.dims[1]):
            for k in range(ref_geom.dims[2]):
                p = (m_ref @ np.array([i, j, k, 1.0]))[:3]
                q = transform.apply(p[None, :])[0] if transform is not None else p
                c = (m_src_inv @ np.append(q, 1.0))[:3]
                out[i, j, k] = trilinear_at(data, c) if kind == "trilinear" else nearest_at(data, c)
    return out


def pv_mutual_information(f, m, bins, frange, mrange):
    """Partial-volume (linear-split) joint histogram MI, one sample at a time."""
    h = np.zeros((bins, bins))

    def split(v, lo, hi):
        pos = 0.0 if hi <= lo else (v - lo) / (hi - lo) * (bins - 1)
        pos = min(max(pos, 0.0), bins - 1.0)
        i = min(int(math.floor(pos)), bins - 2)
        return i, pos - i

    for a, b in zip(f, m):
        i, fi = split(a, *frange)
        j, fj = split(b, *mrange)
        h[i, j] += (1 - fi) * (1 - fj)
        h[i + 1, j] += fi * (1 - fj)
        h[i, j + 1] += (1 - fi) * fj
        h[i + 1, j + 1] += fi * fj
    p = h / h.sum()
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    mi = 0.0
    for i in range(bins):
        for j in range(bins):
            if p[i, j] > 0:
                mi += p[i, j] * math.log(p[i, j] / (pf[i] * pm[j]))
    return mi


def mean_loop(arrays):
    out = np.zeros(arrays[0].shape)
    for idx in np.ndindex(arrays[0].shape):
        s = 0.0
        for a in arrays:
            s += float(a[idx])
        out[idx] = s / len(arrays)
    return out
