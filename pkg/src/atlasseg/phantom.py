"""Synthetic concentric-ellipsoid brain phantoms with known tissue labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import SettingsError
from .registration.transforms import euler_to_matrix
from .volume import CSF, GM, WM, Geometry, LabelVolume, Volume


@dataclass(frozen=True)
class PhantomSpec:
    """Outer radii (mm) of each tissue ellipsoid; WM is the core, CSF the outermost shell."""

    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    wm_radii: tuple = (14.0, 11.0, 8.0)
    gm_radii: tuple = (21.0, 17.0, 13.5)
    csf_radii: tuple = (26.0, 22.0, 18.0)
    intensities: tuple = (40.0, 80.0, 120.0)  # CSF, GM, WM
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    center_offset: tuple = (0.0, 0.0, 0.0)
    rotation_deg: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        wm, gm, csf = (np.asarray(r, dtype=float) for r in (self.wm_radii, self.gm_radii, self.csf_radii))
        if np.any(wm <= 0) or not (np.all(wm < gm) and np.all(gm < csf)):
            raise SettingsError("phantom radii must be positive and strictly nested (WM < GM < CSF)")
        if len(set(float(v) for v in self.intensities)) != 3 or min(self.intensities) <= 0:
            raise SettingsError("tissue intensities must be three distinct positive values")
        if not 0 <= self.bias_amplitude < 1:
            raise SettingsError("bias_amplitude must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise SettingsError("noise_sigma must be non-negative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}).validate()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _inside(local: np.ndarray, radii) -> np.ndarray:
    return np.sum((local / np.asarray(radii, dtype=float)) ** 2, axis=-1) <= 1.0


def bias_field(geometry: Geometry, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative field in ``[1 - amplitude, 1 + amplitude]`` (Gaussian bump)."""
    pts = geometry.world_points()
    lo = geometry.indices_to_world(np.zeros(3))
    hi = geometry.indices_to_world(np.asarray(geometry.dims, dtype=float) - 1)
    center = lo + rng.uniform(0.25, 0.75, size=3) * (hi - lo)
    width = 0.5 * float(np.linalg.norm(hi - lo)) / np.sqrt(3.0)
    bump = np.exp(-np.sum((pts - center) ** 2, axis=1) / (2 * width**2))
    field = 1.0 + amplitude * (2.0 * bump - 1.0)
    return field.reshape(geometry.dims, order="F")


def generate_phantom(spec: PhantomSpec | None = None) -> tuple[Volume, LabelVolume]:
    """Build an intensity volume and its labels from ``spec``; deterministic per seed.

    Noise is added inside the head only so the background stays exactly zero,
    as in skull-stripped data.
    """
    spec = (spec or PhantomSpec()).validate()
    geom = Geometry(spec.dims, spec.spacing)
    rng = np.random.default_rng(spec.seed)
    pts = geom.world_points()
    center = geom.center() + np.asarray(spec.center_offset, dtype=float)
    rot = euler_to_matrix(np.deg2rad(spec.rotation_deg))
    local = (pts - center) @ rot  # rot.T applied to each row vector

    labels = np.zeros(pts.shape[0], dtype=np.uint8)
    labels[_inside(local, spec.csf_radii)] = CSF
    labels[_inside(local, spec.gm_radii)] = GM
    labels[_inside(local, spec.wm_radii)] = WM
    labels = labels.reshape(spec.dims, order="F")

    means = np.zeros(4)
    means[1:] = spec.intensities
    img = means[labels]
    if spec.bias_amplitude > 0:
        img = img * bias_field(geom, spec.bias_amplitude, rng)
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        img = np.where(labels > 0, np.clip(img + noise, 1e-3, None), 0.0)
    return Volume(geom, img), LabelVolume(geom, labels)


def cohort_spec(seed: int, base: PhantomSpec | None = None, max_shift: float = 3.0, max_rotation: float = 5.0,
                max_scale: float = 0.05, bias_amplitude: float = 0.1, noise_sigma: float = 3.0) -> PhantomSpec:
    """A subject-like variant of ``base``: random pose, global size, bias and noise drawn from ``seed``.

    The variation is affine (shift, rotation, isotropic scale), so an affine
    registration can in principle undo it exactly.
    """
    base = base or PhantomSpec()
    rng = np.random.default_rng(seed)
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    shift = rng.uniform(-max_shift, max_shift, size=3)
    rot = rng.uniform(-max_rotation, max_rotation, size=3)
    d = base.to_dict()
    d.update(
        wm_radii=[r * scale for r in base.wm_radii],
        gm_radii=[r * scale for r in base.gm_radii],
        csf_radii=[r * scale for r in base.csf_radii],
        center_offset=shift.tolist(),
        rotation_deg=rot.tolist(),
        bias_amplitude=bias_amplitude,
        noise_sigma=noise_sigma,
        seed=int(seed),
    )
    return PhantomSpec.from_dict(d)
