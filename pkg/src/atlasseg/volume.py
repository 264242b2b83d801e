"""Voxel-grid data model, coordinate mapping and resampling.

Arrays are stored with shape ``(nx, ny, nz)`` and indexed ``data[i, j, k]``.
Flattened (file) order is x-fastest, i.e. ``data.ravel(order="F")``.

World coordinates follow ``p = origin + direction @ (spacing * index)``.
Resampling uses the pull-back convention: every output voxel is mapped through
the transform into the input's world space and the input is sampled there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, GeometryError, InterpolationError, LabelDomainError

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
LABELS = (BACKGROUND, CSF, GM, WM)
CLASS_NAMES = {BACKGROUND: "BG", CSF: "CSF", GM: "GM", WM: "WM"}

# continuous indices closer than this to an integer are snapped onto it
_SNAP = 1e-6
_ORTHO_TOL = 1e-6


def _as_triple(values, dtype, name):
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Geometry:
    """Physical layout of a voxel grid (no data)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in _as_triple(self.dims, np.int64, "dims"))
        spacing = tuple(float(s) for s in _as_triple(self.spacing, np.float64, "spacing"))
        origin = tuple(float(o) for o in _as_triple(self.origin, np.float64, "origin"))
        direction = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        if min(dims) < 1:
            raise GeometryError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        if not np.all(np.isfinite(origin)):
            raise GeometryError("origin must be finite")
        if not np.allclose(direction.T @ direction, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise GeometryError("direction matrix is not orthonormal")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def __eq__(self, other):
        if not isinstance(other, Geometry):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.direction, other.direction)
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.origin, self.direction.tobytes()))

    def isclose(self, other: "Geometry", atol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol, rtol=0)
            and np.allclose(self.origin, other.origin, atol=atol, rtol=0)
            and np.allclose(self.direction, other.direction, atol=atol, rtol=0)
        )

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix mapping (i, j, k, 1) to world mm."""
        m = np.eye(4)
        m[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        m[:3, 3] = self.origin
        return m

    def indices_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map an ``(N, 3)`` array of (possibly fractional) indices to world points."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx * np.asarray(self.spacing)) @ self.direction.T

    def world_to_indices(self, points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`indices_to_world`; returns continuous indices."""
        points = np.asarray(points, dtype=np.float64)
        return ((points - np.asarray(self.origin)) @ self.direction) / np.asarray(self.spacing)

    def grid_indices(self, z_slice: slice | None = None) -> np.ndarray:
        """All voxel indices as an ``(N, 3)`` array in x-fastest order."""
        nx, ny, nz = self.dims
        ks = np.arange(nz)[z_slice] if z_slice is not None else np.arange(nz)
        i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), ks, indexing="ij")
        return np.stack([i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")], axis=1)

    def world_points(self) -> np.ndarray:
        return self.indices_to_world(self.grid_indices())

    def center(self) -> np.ndarray:
        """World position of the geometric centre of the grid."""
        return self.indices_to_world((np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "direction": self.direction.tolist(),
        }


class _GridData:
    geometry: Geometry
    data: np.ndarray

    def _init(self, geometry, data, dtype):
        if not isinstance(geometry, Geometry):
            raise GeometryError("geometry must be a Geometry instance")
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 1:
            if arr.size != geometry.size:
                raise GeometryError(f"data length {arr.size} != {geometry.size}")
            arr = arr.reshape(geometry.dims, order="F")
        if arr.shape != geometry.dims:
            raise GeometryError(f"data shape {arr.shape} != dims {geometry.dims}")
        arr.setflags(write=False)
        self.geometry = geometry
        self.data = arr

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    @property
    def direction(self):
        return self.geometry.direction

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")


class Volume(_GridData):
    """Scalar intensity image (float32) with physical geometry. Immutable."""

    def __init__(self, geometry: Geometry, data):
        self._init(geometry, data, np.float32)
        if not np.all(np.isfinite(self.data)):
            raise GeometryError("volume contains non-finite intensities")

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing})"

    def with_data(self, data) -> "Volume":
        return Volume(self.geometry, data)


class LabelVolume(_GridData):
    """Per-voxel tissue labels in {0 BG, 1 CSF, 2 GM, 3 WM}. Immutable."""

    def __init__(self, geometry: Geometry, data):
        raw = np.asarray(data)
        if raw.size and (raw.min() < 0 or raw.max() > WM):
            bad = sorted(set(np.unique(raw).tolist()) - set(LABELS))
            raise LabelDomainError(f"labels outside {{0,1,2,3}}: {bad[:8]}")
        self._init(geometry, raw, np.uint8)

    def __repr__(self):
        return f"LabelVolume(dims={self.dims}, spacing={self.spacing})"

    def mask(self, label: int) -> np.ndarray:
        return self.data == label

    def with_data(self, data) -> "LabelVolume":
        return LabelVolume(self.geometry, data)


def check_same_geometry(a: _GridData, b: _GridData, what: str = "volumes", atol: float = 1e-5):
    if not a.geometry.isclose(b.geometry, atol=atol):
        raise GeometryError(f"{what} do not share the same geometry")


def voxel_to_world(geometry: Geometry, index) -> np.ndarray:
    """World position (mm) of an integer voxel index."""
    idx = np.asarray(index)
    if idx.shape != (3,):
        raise BoundsError(f"index must be a triple, got {idx!r}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(geometry.dims)):
        raise BoundsError(f"index {tuple(idx.tolist())} outside dims {geometry.dims}")
    return geometry.indices_to_world(idx[None, :].astype(np.float64))[0]


def world_to_voxel(geometry: Geometry, point) -> np.ndarray:
    """Continuous voxel index of a world point (no bounds check)."""
    return geometry.world_to_indices(np.asarray(point, dtype=np.float64)[None, :])[0]


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.round(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def _corners(data: np.ndarray, idx: np.ndarray):
    """Inside mask, the 8 corner values and fractional offsets for trilinear lookups."""
    dims = np.asarray(data.shape)
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    c = idx[inside]
    i0 = np.clip(np.floor(c).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = c - i0
    # flat C-order offsets; axes of length 1 never step
    sx, sy = dims[1] * dims[2], dims[2]
    step = np.array([sx if dims[0] > 1 else 0, sy if dims[1] > 1 else 0, 1 if dims[2] > 1 else 0])
    base = i0[:, 0] * sx + i0[:, 1] * sy + i0[:, 2]
    flat = data.reshape(-1)
    v = {}
    for a in (0, 1):
        for b in (0, 1):
            for cc in (0, 1):
                v[a, b, cc] = flat.take(base + a * step[0] + b * step[1] + cc * step[2])
    return inside, v, f[:, 0], f[:, 1], f[:, 2]


def interpolate_trilinear(data: np.ndarray, idx: np.ndarray, background: float = 0.0) -> np.ndarray:
    """Trilinear interpolation of ``data`` at continuous indices ``idx`` (N, 3).

    Indices outside ``[0, n-1]`` on any axis yield ``background``.
    """
    idx = _snap(np.asarray(idx, dtype=np.float64))
    out = np.full(idx.shape[0], background, dtype=np.float64)
    inside, v, fx, fy, fz = _corners(data, idx)
    if not inside.any():
        return out
    gx = 1 - fx
    c00 = v[0, 0, 0] * gx + v[1, 0, 0] * fx
    c10 = v[0, 1, 0] * gx + v[1, 1, 0] * fx
    c01 = v[0, 0, 1] * gx + v[1, 0, 1] * fx
    c11 = v[0, 1, 1] * gx + v[1, 1, 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def interpolate_trilinear_with_gradient(data: np.ndarray, idx: np.ndarray, background: float = 0.0):
    """Trilinear values and their analytic index-space gradient ``(N, 3)``.

    Points outside the grid get ``background`` and a zero gradient.
    """
    idx = _snap(np.asarray(idx, dtype=np.float64))
    val = np.full(idx.shape[0], background, dtype=np.float64)
    grad = np.zeros((idx.shape[0], 3))
    inside, v, fx, fy, fz = _corners(data, idx)
    if not inside.any():
        return val, grad
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    c00 = v[0, 0, 0] * gx + v[1, 0, 0] * fx
    c10 = v[0, 1, 0] * gx + v[1, 1, 0] * fx
    c01 = v[0, 0, 1] * gx + v[1, 0, 1] * fx
    c11 = v[0, 1, 1] * gx + v[1, 1, 1] * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    val[inside] = c0 * gz + c1 * fz
    dx00 = v[1, 0, 0] - v[0, 0, 0]
    dx10 = v[1, 1, 0] - v[0, 1, 0]
    dx01 = v[1, 0, 1] - v[0, 0, 1]
    dx11 = v[1, 1, 1] - v[0, 1, 1]
    grad[inside, 0] = (dx00 * gy + dx10 * fy) * gz + (dx01 * gy + dx11 * fy) * fz
    grad[inside, 1] = (c10 - c00) * gz + (c11 - c01) * fz
    grad[inside, 2] = c1 - c0
    return val, grad


def trilinear_gradient(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Analytic index-space gradient of the trilinear interpolant at ``idx``."""
    return interpolate_trilinear_with_gradient(data, idx)[1]


def interpolate_nearest(data: np.ndarray, idx: np.ndarray, background: int = 0) -> np.ndarray:
    """Nearest-voxel lookup; exact half-way ties go to the lower index."""
    idx = _snap(np.asarray(idx, dtype=np.float64))
    r = np.ceil(idx - 0.5).astype(np.int64)
    dims = np.asarray(data.shape)
    inside = np.all((r >= 0) & (r < dims), axis=1)
    out = np.full(idx.shape[0], background, dtype=data.dtype)
    ri = r[inside]
    out[inside] = data[ri[:, 0], ri[:, 1], ri[:, 2]]
    return out


def trilinear_sample(volume: Volume, point, background: float = 0.0) -> float:
    idx = volume.geometry.world_to_indices(np.asarray(point, dtype=np.float64)[None, :])
    return float(interpolate_trilinear(volume.data, idx, background)[0])


def nearest_sample(labels: LabelVolume, point) -> int:
    idx = labels.geometry.world_to_indices(np.asarray(point, dtype=np.float64)[None, :])
    return int(interpolate_nearest(labels.data, idx)[0])


# voxels per resampling chunk; bounds peak memory for large grids
_CHUNK = 1 << 20


def pullback_indices(reference: Geometry, transform, source: Geometry):
    """Yield ``(z_slice, indices)`` chunks: source-grid continuous indices of the
    reference voxels in that z-slab after mapping through ``transform``."""
    nx, ny, nz = reference.dims
    slab = max(1, _CHUNK // (nx * ny))
    for z0 in range(0, nz, slab):
        zs = slice(z0, min(nz, z0 + slab))
        pts = reference.indices_to_world(reference.grid_indices(zs))
        if transform is not None:
            pts = transform.apply(pts)
        yield zs, source.world_to_indices(pts)


def resample(
    image: Volume | LabelVolume,
    transform,
    reference: Geometry,
    interp: str = "trilinear",
    background: float = 0.0,
):
    """Resample ``image`` onto ``reference`` through ``transform`` (pull-back).

    ``transform`` must provide ``apply(points) -> points`` mapping reference
    world coordinates into the image's world coordinates; ``None`` means identity.
    """
    if interp not in ("trilinear", "nearest"):
        raise InterpolationError(f"unknown interpolation {interp!r}")
    is_labels = isinstance(image, LabelVolume)
    if is_labels and interp == "trilinear":
        raise InterpolationError("trilinear interpolation is not valid for label volumes")
    nx, ny, _ = reference.dims
    out = np.empty(reference.dims, dtype=np.float64 if not is_labels else np.uint8)
    for zs, idx in pullback_indices(reference, transform, image.geometry):
        if interp == "nearest":
            vals = interpolate_nearest(image.data, idx, int(background))
        else:
            vals = interpolate_trilinear(image.data, idx, background)
        out[:, :, zs] = vals.reshape((nx, ny, zs.stop - zs.start), order="F")
    return type(image)(reference, out)
