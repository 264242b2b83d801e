"""Perona-Malik anisotropic diffusion on 3D volumes (explicit 6-neighbour scheme)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SettingsError
from ..volume import Volume

MAX_DT = 1.0 / 6.0


@dataclass(frozen=True)
class DiffusionSettings:
    iterations: int = 10
    kappa: float = 30.0
    dt: float = 1.0 / 7.0
    conduction: str = "exponential"

    def validate(self):
        if not (0 < self.dt <= MAX_DT):
            raise SettingsError(f"dt={self.dt} outside stability range (0, 1/6]")
        if not self.kappa > 0:
            raise SettingsError(f"kappa must be positive, got {self.kappa}")
        if self.iterations < 0:
            raise SettingsError(f"iterations must be >= 0, got {self.iterations}")
        if self.conduction not in ("exponential", "rational"):
            raise SettingsError(f"unknown conduction function {self.conduction!r}")
        return self


def conduction(grad: np.ndarray, kappa: float, kind: str = "exponential") -> np.ndarray:
    r = (grad / kappa) ** 2
    if kind == "exponential":
        return np.exp(-r)
    return 1.0 / (1.0 + r)


def diffuse_array(img: np.ndarray, settings: DiffusionSettings, spacing=(1.0, 1.0, 1.0),
                  mask: np.ndarray | None = None) -> np.ndarray:
    """Run the diffusion on a raw array; returns float64.

    Spacing is taken relative to the smallest axis, so the finest axis has unit
    step and the ``dt <= 1/6`` bound keeps the update a convex combination.
    With ``mask``, only faces between two mask voxels carry flux: the region is
    diffused with zero-flux walls and voxels outside it are left untouched.
    """
    settings.validate()
    u = np.array(img, dtype=np.float64, copy=True)
    open_faces = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != u.shape:
            raise SettingsError("diffusion mask shape does not match the volume")
        open_faces = [(m[_lo(a)] & m[_hi(a)]) if u.shape[a] > 1 else None for a in range(3)]
    rel = np.asarray(spacing, dtype=np.float64) / min(spacing)
    kappa, kind, dt = settings.kappa, settings.conduction, settings.dt
    for _ in range(settings.iterations):
        update = np.zeros_like(u)
        for axis in range(3):
            if u.shape[axis] < 2:
                continue
            h = rel[axis]
            grad = np.diff(u, axis=axis) / h
            flux = conduction(np.abs(grad), kappa, kind) * grad / h
            if open_faces is not None:
                flux *= open_faces[axis]
            # flux between voxel n and n+1; zero-flux outer faces
            update[_lo(axis)] += flux
            update[_hi(axis)] -= flux
        u += dt * update
    return u


def _lo(axis):
    s = [slice(None)] * 3
    s[axis] = slice(0, -1)
    return tuple(s)


def _hi(axis):
    s = [slice(None)] * 3
    s[axis] = slice(1, None)
    return tuple(s)


def anisotropic_diffusion(volume: Volume, settings: DiffusionSettings | None = None, mask=None) -> Volume:
    """Edge-preserving smoothing of ``volume``; returns a new volume.

    ``mask`` (optional) confines the smoothing to a region; see :func:`diffuse_array`.
    """
    settings = (settings or DiffusionSettings()).validate()
    if settings.iterations == 0:
        return volume.with_data(volume.data)
    m = None if mask is None else np.asarray(getattr(mask, "data", mask)) != 0
    out = diffuse_array(volume.data, settings, volume.spacing, m)
    return volume.with_data(out.astype(np.float32))
