"""Spatial transforms mapping fixed-space world points (mm) into moving space.

All transforms expose ``apply(points)`` for an ``(N, 3)`` array and a JSON-able
``to_dict``; :func:`transform_from_dict` reverses it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import bspline
from ..errors import GeometryError
from ..volume import Geometry


def euler_to_matrix(angles) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` for angles ``(about x, about y, about z)`` in radians."""
    ax, ay, az = (float(a) for a in angles)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_derivatives(angles) -> list[np.ndarray]:
    """Partial derivatives of :func:`euler_to_matrix` w.r.t. each angle."""
    ax, ay, az = (float(a) for a in angles)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    ay = -np.arcsin(np.clip(r[2, 0], -1.0, 1.0))
    if abs(np.cos(ay)) > 1e-12:
        ax = np.arctan2(r[2, 1], r[2, 2])
        az = np.arctan2(r[1, 0], r[0, 0])
    else:  # gimbal lock: fold x into z
        ax = 0.0
        az = np.arctan2(-r[0, 1], r[1, 1])
    return np.array([ax, ay, az])


def rotation_angle(r: np.ndarray) -> float:
    """Angle (radians) of the rotation matrix ``r``."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def _vec(v, name):
    arr = np.array(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be 3 finite values")
    return arr


class Transform:
    kind = "abstract"

    def apply(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass(frozen=True)
class IdentityTransform(Transform):
    kind = "identity"

    def apply(self, points):
        return np.asarray(points, dtype=np.float64)

    def to_dict(self):
        return {"type": self.kind}


@dataclass(frozen=True, eq=False)
class AffineTransform(Transform):
    """``T(x) = A (x - c) + c + t``."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind = "affine"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise GeometryError("affine matrix must be finite")
        det = np.linalg.det(m)
        if not (0.2 <= det <= 5.0):
            raise GeometryError(f"affine determinant {det:.4g} outside [0.2, 5]")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", _vec(self.translation, "translation"))
        object.__setattr__(self, "center", _vec(self.center, "center"))

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.matrix.T + self.center + self.translation

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.center + self.translation - self.matrix @ self.center
        return h

    def to_dict(self):
        return {
            "type": self.kind,
            "matrix": self.matrix.tolist(),
            "translation": self.translation.tolist(),
            "center": self.center.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RigidTransform(Transform):
    """Rotation (Euler angles, ``Rz Ry Rx``) about ``center`` followed by translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind = "rigid"

    def __post_init__(self):
        object.__setattr__(self, "rotation", _vec(self.rotation, "rotation"))
        object.__setattr__(self, "translation", _vec(self.translation, "translation"))
        object.__setattr__(self, "center", _vec(self.center, "center"))

    @property
    def matrix(self) -> np.ndarray:
        return euler_to_matrix(self.rotation)

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.matrix.T + self.center + self.translation

    def inverse(self) -> "RigidTransform":
        r = self.matrix
        return RigidTransform(matrix_to_euler(r.T), -r.T @ self.translation, self.center)

    def to_affine(self) -> AffineTransform:
        return AffineTransform(self.matrix, self.translation, self.center)

    def to_dict(self):
        return {
            "type": self.kind,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "center": self.center.tolist(),
        }


@dataclass(frozen=True, eq=False)
class BSplineTransform(Transform):
    """Affine base plus a cubic B-spline free-form displacement.

    ``T(x) = base(x) + sum_k B(u(x) - k) c_k`` where ``u`` is the position of ``x``
    in control-grid units along the grid axes.
    """

    grid_origin: np.ndarray
    grid_spacing: np.ndarray
    grid_dims: tuple
    coefficients: np.ndarray
    grid_direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    base: AffineTransform = field(default_factory=AffineTransform)
    kind = "bspline"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        coeffs = np.array(self.coefficients, dtype=np.float64).reshape(dims + (3,))
        spacing = _vec(self.grid_spacing, "grid_spacing")
        if np.any(spacing <= 0) or min(dims) < 4:
            raise GeometryError("B-spline grid needs positive spacing and >= 4 control points per axis")
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "grid_spacing", spacing)
        object.__setattr__(self, "grid_origin", _vec(self.grid_origin, "grid_origin"))
        object.__setattr__(self, "grid_direction", np.array(self.grid_direction, dtype=np.float64).reshape(3, 3))

    @classmethod
    def covering(cls, geometry: Geometry, spacing_mm: float, base: AffineTransform | None = None):
        """Zero-displacement grid aligned with ``geometry`` covering its field of view plus one cell."""
        extent = (np.asarray(geometry.dims) - 1) * np.asarray(geometry.spacing)
        spacing = np.full(3, float(spacing_mm))
        cells = np.maximum(1, np.ceil(extent / spacing - 1e-9)).astype(int)
        dims = tuple(int(c) + 3 for c in cells)
        origin = np.asarray(geometry.origin) - geometry.direction @ spacing
        return cls(origin, spacing, dims, np.zeros(dims + (3,)), geometry.direction,
                   base if base is not None else AffineTransform())

    def grid_coordinates(self, points: np.ndarray) -> np.ndarray:
        return ((np.asarray(points, dtype=np.float64) - self.grid_origin) @ self.grid_direction) / self.grid_spacing

    def displacement(self, points: np.ndarray) -> np.ndarray:
        u = self.grid_coordinates(points)
        base_idx = np.floor(u).astype(np.int64) - 1
        out = np.zeros((u.shape[0], 3))
        dims = np.asarray(self.grid_dims)
        weights = [bspline.cubic_bspline(u[:, a:a + 1] - (base_idx[:, a:a + 1] + np.arange(4))) for a in range(3)]
        for a in range(4):
            ia = base_idx[:, 0] + a
            for b in range(4):
                ib = base_idx[:, 1] + b
                wab = weights[0][:, a] * weights[1][:, b]
                for c in range(4):
                    ic = base_idx[:, 2] + c
                    ok = (ia >= 0) & (ia < dims[0]) & (ib >= 0) & (ib < dims[1]) & (ic >= 0) & (ic < dims[2])
                    if not ok.any():
                        continue
                    w = wab[ok] * weights[2][ok, c]
                    out[ok] += w[:, None] * self.coefficients[ia[ok], ib[ok], ic[ok]]
        return out

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.base.apply(p) + self.displacement(p)

    def with_coefficients(self, coefficients) -> "BSplineTransform":
        return BSplineTransform(self.grid_origin, self.grid_spacing, self.grid_dims, coefficients,
                                self.grid_direction, self.base)

    def to_dict(self):
        return {
            "type": self.kind,
            "grid_origin": self.grid_origin.tolist(),
            "grid_spacing": self.grid_spacing.tolist(),
            "grid_dims": list(self.grid_dims),
            "grid_direction": self.grid_direction.tolist(),
            "coefficients": self.coefficients.reshape(-1, 3).tolist(),
            "base": self.base.to_dict(),
        }


def transform_from_dict(d: dict) -> Transform:
    kind = d.get("type")
    if kind == "identity":
        return IdentityTransform()
    if kind == "rigid":
        return RigidTransform(d["rotation"], d["translation"], d["center"])
    if kind == "affine":
        return AffineTransform(d["matrix"], d["translation"], d["center"])
    if kind == "bspline":
        base = transform_from_dict(d["base"])
        if isinstance(base, RigidTransform):
            base = base.to_affine()
        return BSplineTransform(d["grid_origin"], d["grid_spacing"], tuple(d["grid_dims"]),
                                np.asarray(d["coefficients"]), d["grid_direction"], base)
    raise ValueError(f"unknown transform type {kind!r}")


def load_transform(path) -> Transform:
    return transform_from_dict(json.loads(Path(path).read_text()))
