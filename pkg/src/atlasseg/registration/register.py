"""Multi-resolution intensity registration maximising mutual information.

Stages run rigid -> affine -> B-spline, each starting from the previous result.
Every stage maximises a sampled partial-volume MI with its analytic gradient
(central differences are available for rigid/affine). Rotation and matrix
parameters are scaled by an intensity-weighted radius so all parameters move
in comparable millimetre units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .. import bspline
from ..errors import DivergenceError, GeometryError, NoOverlapError, SettingsError
from ..volume import Geometry, Volume, interpolate_trilinear
from .mi import MIEvaluator, mutual_information
from .transforms import AffineTransform, BSplineTransform, RigidTransform, Transform, euler_derivatives

logger = logging.getLogger(__name__)

MODES = ("rigid", "affine", "affine_bspline")


@dataclass(frozen=True)
class RegistrationSettings:
    pyramid_levels: int = 3
    smoothing_sigmas: tuple = (4.0, 2.0, 1.0)
    shrink_factors: tuple = (4, 2, 1)
    iterations: tuple = (256, 128, 64)
    mi_bins: int = 32
    sample_fraction: tuple = (0.1, 0.1, 0.25)
    min_samples: int = 4096
    initial_step: float = 2.0
    min_step: float = 0.01
    step_growth: float = 1.1
    step_shrink: float = 0.5
    gradient_delta: float = 0.25
    bspline_grid_spacing: float = 20.0
    bspline_initial_step: float = 1.0
    center_of_mass_init: bool = True
    gradient: str = "analytic"
    optimizer: str = "lbfgs"
    sampling_margin: float | None = 4.0

    def validate(self):
        n = self.pyramid_levels
        if n < 1:
            raise SettingsError("pyramid_levels must be >= 1")
        for name in ("smoothing_sigmas", "shrink_factors", "iterations", "sample_fraction"):
            if len(getattr(self, name)) != n:
                raise SettingsError(f"{name} needs one entry per pyramid level ({n})")
        if self.mi_bins < 8:
            raise SettingsError("mi_bins must be >= 8")
        if not all(0 < f <= 1 for f in self.sample_fraction):
            raise SettingsError("sample_fraction entries must lie in (0, 1]")
        if any(int(s) < 1 for s in self.shrink_factors):
            raise SettingsError("shrink_factors must be >= 1")
        if any(s < 0 for s in self.smoothing_sigmas):
            raise SettingsError("smoothing_sigmas must be >= 0")
        if not (0 < self.step_shrink < 1) or self.step_growth < 1:
            raise SettingsError("need 0 < step_shrink < 1 <= step_growth")
        if self.initial_step <= 0 or self.min_step <= 0 or self.gradient_delta <= 0:
            raise SettingsError("step sizes must be positive")
        if self.gradient not in ("analytic", "numeric"):
            raise SettingsError("gradient must be 'analytic' or 'numeric'")
        if self.optimizer not in ("lbfgs", "regular_step"):
            raise SettingsError("optimizer must be 'lbfgs' or 'regular_step'")
        if self.sampling_margin is not None and self.sampling_margin < 0:
            raise SettingsError("sampling_margin must be >= 0 (or None for the whole field of view)")
        if self.bspline_grid_spacing <= 0:
            raise SettingsError("bspline_grid_spacing must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationSettings":
        d = dict(d)
        for key in ("smoothing_sigmas", "shrink_factors", "iterations", "sample_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass
class LevelRecord:
    stage: str
    level: int
    start: float
    end: float
    iterations: int


@dataclass
class RegistrationResult:
    transform: Transform
    initial: Transform
    initial_mi: float
    final_mi: float
    levels: list[LevelRecord] = field(default_factory=list)


@dataclass
class _Level:
    index: int
    shrink: int
    geometry: Geometry
    fixed: np.ndarray
    fixed_flat: np.ndarray
    points: np.ndarray
    pool: np.ndarray  # indices of points eligible for sampling
    jitter_points: np.ndarray  # off-grid sample positions used by the parametric stages
    jitter_fixed: np.ndarray  # fixed intensities interpolated at those positions
    evaluator: MIEvaluator
    n_samples: int
    iterations: int


def center_of_mass(volume: Volume) -> np.ndarray:
    w = np.clip(volume.flat().astype(np.float64), 0, None)
    if w.sum() <= 0:
        return volume.geometry.center()
    idx = volume.geometry.grid_indices()
    com_idx = (idx * w[:, None]).sum(axis=0) / w.sum()
    return volume.geometry.indices_to_world(com_idx)


def _smooth(data: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if sigma_mm <= 0:
        return data
    return ndimage.gaussian_filter(data, [sigma_mm / s for s in spacing], mode="nearest")


def sampling_region(fixed: Volume, margin_mm: float | None, mask=None) -> np.ndarray:
    """Boolean fixed-grid region that registration samples are drawn from.

    Either ``mask`` or the nonzero foreground grown by ``margin_mm``. Keeping
    samples off the empty border stops whole faces of the grid leaving the
    moving field of view at once, which makes the sampled MI jump.
    """
    if mask is not None:
        region = np.asarray(mask) != 0
    elif margin_mm is None:
        region = np.ones(fixed.dims, dtype=bool)
    else:
        fg = fixed.data > 0
        if not fg.any() or fg.all():
            return np.ones(fixed.dims, dtype=bool)
        region = ndimage.distance_transform_edt(~fg, sampling=fixed.spacing) <= margin_mm
    if np.count_nonzero(region) < 2:
        raise SettingsError("registration sampling region has fewer than 2 voxels")
    return region


def _jittered(geom: Geometry, data: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Every grid node moved by a uniform offset of up to half a voxel, with interpolated values.

    When fixed samples sit exactly on grid nodes only the moving image is
    interpolated, and the blur that adds makes MI dip at grid-aligned poses
    (including the identity). Interpolating both sides removes that bias.
    """
    idx = geom.grid_indices() + rng.uniform(-0.5, 0.5, size=(geom.size, 3))
    idx = np.clip(idx, 0.0, np.asarray(geom.dims, dtype=np.float64) - 1)
    return geom.indices_to_world(idx), interpolate_trilinear(data, idx)


def _build_levels(fixed: Volume, moving: Volume, settings: RegistrationSettings, mask=None, seed: int = 0):
    region = sampling_region(fixed, settings.sampling_margin, mask)
    levels = []
    for i in range(settings.pyramid_levels):
        f = int(settings.shrink_factors[i])
        sigma = float(settings.smoothing_sigmas[i])
        fs = _smooth(fixed.data, sigma, fixed.spacing)[::f, ::f, ::f]
        geom = Geometry(fs.shape, tuple(np.asarray(fixed.spacing) * f), fixed.origin, fixed.direction)
        ms = _smooth(moving.data, sigma, moving.spacing)
        pool = np.flatnonzero(region[::f, ::f, ::f].ravel(order="F"))
        if pool.size < 2:
            pool = np.arange(geom.size)
        n = pool.size
        n_samples = min(n, max(int(round(settings.sample_fraction[i] * n)), settings.min_samples))
        jpts, jvals = _jittered(geom, fs, np.random.default_rng([int(seed), 99, i]))
        levels.append(_Level(i, f, geom, fs, fs.ravel(order="F"), geom.world_points(), pool, jpts, jvals,
                             MIEvaluator(fs, ms, moving.geometry, settings.mi_bins), n_samples,
                             int(settings.iterations[i])))
    return levels


class _Registration:
    def __init__(self, fixed: Volume, moving: Volume, settings: RegistrationSettings, seed: int, mask=None):
        self.fixed = fixed
        self.moving = moving
        self.settings = settings
        self.seed = int(seed)
        self.levels = _build_levels(fixed, moving, settings, mask, self.seed)
        self.records: list[LevelRecord] = []
        # stage name -> objective(level, idx, x, grad); kept for diagnostics
        self.objectives: dict = {}
        # intensity-weighted RMS radius: converts rotation/matrix parameters to ~mm of motion
        pts = fixed.geometry.world_points()
        w = np.clip(fixed.flat().astype(np.float64), 0, None)
        if w.sum() <= 0:
            w = np.ones_like(w)
        d2 = np.sum((pts - center_of_mass(fixed)) ** 2, axis=1)
        self.radius = float(np.sqrt(np.sum(w * d2) / w.sum())) or 1.0

    # -- objective helpers -------------------------------------------------

    def _draw(self, rng, level: _Level) -> np.ndarray:
        if level.n_samples >= level.pool.size:
            return level.pool
        return np.sort(rng.choice(level.pool, size=level.n_samples, replace=False))

    def _step_bounds(self, level: _Level, scale: float):
        f = level.shrink / max(self.settings.shrink_factors)
        spacing = min(level.geometry.spacing)
        return self.settings.initial_step * scale * max(f, 0.25), self.settings.min_step * spacing

    # -- optimisation core --------------------------------------------------

    def _levels(self, stage: str, stage_no: int, x0: np.ndarray, objective, step_scale: float, normalise):
        """Run ``objective`` through the pyramid; returns the final parameter vector.

        ``objective(level, idx, x, grad)`` returns the sampled MI (``-inf`` when
        undefined) and, if ``grad`` is true, also its gradient w.r.t. ``x``.
        A level whose full-sample objective ends below its start is reverted.
        """
        x = np.array(x0, dtype=np.float64)
        for level in self.levels:
            rng = np.random.default_rng([self.seed, stage_no, level.index])
            start = objective(level, None, x, False)
            x_start = x.copy()
            if self.settings.optimizer == "lbfgs":
                x, it = self._lbfgs(level, rng, x, objective)
            else:
                x, it = self._regular_step(stage, level, rng, x, objective, step_scale, normalise)
            end = objective(level, None, x, False)
            if not end >= start:
                x, end = x_start, start
            self.records.append(LevelRecord(stage, level.index, start, end, it))
            logger.debug("%s level %d: MI %.5f -> %.5f in %d iterations", stage, level.index, start, end, it)
        return x

    def _lbfgs(self, level: _Level, rng, x, objective):
        # one sample set per level keeps the objective deterministic for the line search
        idx = self._draw(rng, level)
        penalty = 1e6

        def fg(xv):
            f, g = objective(level, idx, xv, True)
            if not np.isfinite(f):
                return penalty, np.zeros_like(xv)
            return -f, -g

        res = optimize.minimize(fg, x, jac=True, method="L-BFGS-B",
                                options={"maxiter": level.iterations, "gtol": 1e-9})
        if not np.all(np.isfinite(res.x)):
            return x, int(res.nit)
        return res.x, int(res.nit)

    def _regular_step(self, stage, level: _Level, rng, x, objective, step_scale, normalise):
        s = self.settings
        step, min_step = self._step_bounds(level, step_scale)
        step0 = step
        it = 0
        for it in range(1, level.iterations + 1):
            idx = self._draw(rng, level)
            f0, grad = objective(level, idx, x, True)
            if not np.isfinite(f0):
                raise DivergenceError(f"{stage}: non-finite objective at level {level.index}, iteration {it}",
                                      stage=stage, iteration=it)
            norm = normalise(grad)
            if norm == 0 or not np.isfinite(norm):
                break
            cand = x + step * grad / norm
            if objective(level, idx, cand, False) > f0:
                x = cand
                step = min(step * s.step_growth, step0)
            else:
                step *= s.step_shrink
                if step < min_step:
                    break
        return x, it

    @staticmethod
    def _sampled(level: _Level, idx):
        idx = level.pool if idx is None else idx
        return level.jitter_points[idx], level.jitter_fixed[idx]

    # -- parametric stages --------------------------------------------------

    def _parametric(self, stage: str, stage_no: int, make, q0: np.ndarray, chain):
        """Optimise a low-dimensional transform in scaled parameter space (units ~ mm).

        ``chain(q, points, point_grad)`` maps per-sample MI gradients (w.r.t.
        moving-space positions) to a gradient in ``q``.
        """
        s = self.settings

        def build(qv):
            try:
                return make(qv)
            except GeometryError:
                return None

        def value(level, pts, vals, qv):
            t = build(qv)
            if t is None:
                return -np.inf
            try:
                return level.evaluator.value(vals, t.apply(pts))
            except NoOverlapError:
                return -np.inf

        def objective(level, idx, qv, grad):
            pts, vals = self._sampled(level, idx)
            if not grad:
                return value(level, pts, vals, qv)
            if s.gradient == "numeric":
                f0 = value(level, pts, vals, qv)
                h = s.gradient_delta * min(level.geometry.spacing)
                return f0, self._numeric_gradient(lambda v: value(level, pts, vals, v), qv, h)
            t = build(qv)
            if t is None:
                return -np.inf, np.zeros_like(qv)
            try:
                f0, pgrad = level.evaluator.value_and_point_gradient(vals, t.apply(pts))
            except NoOverlapError:
                return -np.inf, np.zeros_like(qv)
            return f0, chain(qv, pts, pgrad)

        self.objectives[stage] = objective
        return self._levels(stage, stage_no, q0, objective, 1.0, np.linalg.norm)

    @staticmethod
    def _numeric_gradient(f, q, h):
        grad = np.zeros_like(q)
        for k in range(q.size):
            e = np.zeros_like(q)
            e[k] = h
            fp, fm = f(q + e), f(q - e)
            if np.isfinite(fp) and np.isfinite(fm):
                grad[k] = (fp - fm) / (2 * h)
        return grad

    def rigid(self, init: RigidTransform) -> RigidTransform:
        r = self.radius
        scales = np.array([r, r, r, 1.0, 1.0, 1.0])
        center = init.center

        def make(q):
            p = q / scales
            return RigidTransform(p[:3], p[3:], center)

        def chain(q, pts, pgrad):
            m = pgrad.T @ (pts - center)
            dr = euler_derivatives(q[:3] / scales[:3])
            g = np.array([np.sum(m * d) for d in dr] + list(pgrad.sum(axis=0)))
            return g / scales

        q0 = np.concatenate([init.rotation, init.translation]) * scales
        return make(self._parametric("rigid", 0, make, q0, chain))

    def affine(self, init: AffineTransform) -> AffineTransform:
        r = self.radius
        scales = np.array([r] * 9 + [1.0] * 3)
        center = init.center

        def make(q):
            p = q / scales
            return AffineTransform(p[:9].reshape(3, 3), p[9:], center)

        def chain(q, pts, pgrad):
            m = pgrad.T @ (pts - center)
            return np.concatenate([m.ravel(), pgrad.sum(axis=0)]) / scales

        q0 = np.concatenate([init.matrix.ravel(), init.translation]) * scales
        return make(self._parametric("affine", 1, make, q0, chain))

    # -- B-spline stage ------------------------------------------------------

    def bspline(self, base: AffineTransform) -> BSplineTransform:
        s = self.settings
        tmpl = BSplineTransform.covering(self.fixed.geometry, s.bspline_grid_spacing, base)
        shape = tmpl.coefficients.shape
        cache = {}

        def setup(level):
            # separable per-axis bases on the level grid, plus base-transform positions
            if level.index not in cache:
                geom = level.geometry
                offset = ((np.asarray(geom.origin) - tmpl.grid_origin) @ tmpl.grid_direction) / tmpl.grid_spacing
                bases = [bspline.basis_matrix(offset[a] + np.arange(geom.dims[a]) * geom.spacing[a]
                                              / tmpl.grid_spacing[a], shape[a]) for a in range(3)]
                cache[level.index] = (bases, base.apply(level.points))
            return cache[level.index]

        def objective(level, idx, x, grad):
            bases, base_pts = setup(level)
            idx = level.pool if idx is None else idx
            c = x.reshape(shape)
            disp = np.stack([bspline.evaluate_lattice(c[..., d], bases).ravel(order="F")[idx] for d in range(3)],
                            axis=1)
            pts, vals = base_pts[idx] + disp, level.fixed_flat[idx]
            try:
                if not grad:
                    return level.evaluator.value(vals, pts)
                f0, pgrad = level.evaluator.value_and_point_gradient(vals, pts)
            except NoOverlapError:
                return -np.inf if not grad else (-np.inf, np.zeros_like(x))
            dense = np.zeros((level.geometry.size, 3))
            dense[idx] = pgrad
            dims = level.geometry.dims
            g = np.stack([bspline.contract(dense[:, d].reshape(dims, order="F"), bases) for d in range(3)], axis=-1)
            return f0, g.ravel()

        def normalise(g):
            return float(np.max(np.linalg.norm(g.reshape(-1, 3), axis=1)))

        self.objectives["bspline"] = objective

        x = self._levels("bspline", 2, np.zeros(tmpl.coefficients.size), objective,
                         s.bspline_initial_step / s.initial_step, normalise)
        return tmpl.with_coefficients(x.reshape(shape))


def initial_transform(fixed: Volume, moving: Volume, use_com: bool = True) -> RigidTransform:
    """Rigid start point: rotate about the fixed centre of mass, translate onto the moving one."""
    cf = center_of_mass(fixed)
    if not use_com:
        return RigidTransform(np.zeros(3), np.zeros(3), cf)
    return RigidTransform(np.zeros(3), center_of_mass(moving) - cf, cf)


def run_registration(
    fixed: Volume,
    moving: Volume,
    mode: str = "affine",
    settings: RegistrationSettings | None = None,
    seed: int = 0,
    initial: Transform | None = None,
    mask=None,
) -> RegistrationResult:
    """Register ``moving`` onto ``fixed``; see :func:`register`. Returns diagnostics as well."""
    if mode not in MODES:
        raise SettingsError(f"unknown registration mode {mode!r}; expected one of {MODES}")
    settings = (settings or RegistrationSettings()).validate()
    if fixed.geometry.size == 0 or moving.geometry.size == 0:
        raise SettingsError("cannot register empty volumes")
    if initial is None:
        initial = initial_transform(fixed, moving, settings.center_of_mass_init)
    reg = _Registration(fixed, moving, settings, seed, None if mask is None else getattr(mask, "data", mask))

    if isinstance(initial, RigidTransform):
        current: Transform = reg.rigid(initial)
    elif isinstance(initial, AffineTransform):
        current = initial
    else:
        raise SettingsError("initial transform must be rigid or affine")
    if mode in ("affine", "affine_bspline"):
        start = current.to_affine() if isinstance(current, RigidTransform) else current
        current = reg.affine(start)
    if mode == "affine_bspline":
        current = reg.bspline(current)

    bins = settings.mi_bins
    init_mi = mutual_information(fixed, moving, initial, bins)
    final_mi = mutual_information(fixed, moving, current, bins)
    if not np.isfinite(final_mi):
        raise DivergenceError("non-finite final objective", stage=mode)
    if final_mi < init_mi - 1e-9:
        logger.info("registration did not improve on initialisation (%.5f < %.5f); keeping it", final_mi, init_mi)
        current, final_mi = initial, init_mi
    return RegistrationResult(current, initial, init_mi, final_mi, reg.records)


def register(
    fixed: Volume,
    moving: Volume,
    mode: str = "affine",
    settings: RegistrationSettings | None = None,
    seed: int = 0,
    initial: Transform | None = None,
) -> Transform:
    """Find the transform mapping fixed-space points into moving space.

    ``resample(moving, T, fixed.geometry)`` then aligns ``moving`` onto ``fixed``.
    ``mode`` is ``rigid``, ``affine`` (rigid then affine) or ``affine_bspline``
    (rigid, affine, then a B-spline deformation on top of the affine).
    Sampling is seeded, so the result is deterministic for a given ``seed``.
    """
    return run_registration(fixed, moving, mode, settings, seed, initial).transform


def select_reference(volumes, bins: int = 32) -> int:
    """Index of the volume with the largest summed MI against all others (identity transform).

    Ties go to the lowest index.
    """
    if len(volumes) < 2:
        raise SettingsError("select_reference needs at least 2 volumes")
    n = len(volumes)
    scores = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                scores[i] += mutual_information(volumes[i], volumes[j], None, bins)
    best = scores.max()
    return int(np.flatnonzero(scores >= best - 1e-9)[0])
