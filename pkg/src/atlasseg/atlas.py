"""Probabilistic tissue atlas: build from labelled training pairs, segment new volumes.

A reference case is chosen by summed MI, every other case is registered onto
it, labels are carried along with nearest-neighbour resampling, and the
registered set is reduced to a mean template, per-class probability maps
(vote fractions) and a majority-vote label map. Segmentation registers the
template onto the target and reads the warped maps.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import AlignmentError, CaseError, NumericalError, PairingError, SettingsError
from .registration import (
    IdentityTransform,
    RegistrationSettings,
    Transform,
    register,
    select_reference,
)
from .volume import (
    LABELS,
    Geometry,
    LabelVolume,
    Volume,
    interpolate_trilinear,
    pullback_indices,
    resample,
)

logger = logging.getLogger(__name__)

PROB_NAMES = ("bg", "csf", "gm", "wm")
FUSIONS = ("average", "majority")


def _same_grid(items, what):
    if not items:
        raise SettingsError(f"{what}: need at least one volume")
    g0 = items[0].geometry
    for it in items[1:]:
        if not it.geometry.isclose(g0):
            raise AlignmentError(f"{what}: volumes are not on a common grid")
    return g0


def propagate_labels(labels: LabelVolume, transform: Transform | None, reference: Geometry,
                     source: Geometry | None = None) -> LabelVolume:
    """Carry ``labels`` onto ``reference`` through ``transform`` (nearest neighbour).

    ``transform`` maps reference points into the labels' space, i.e. it is the
    result of registering the reference image (fixed) to the labels' image
    (moving). ``source`` is that image's geometry; if given it must match.
    """
    if source is not None and not labels.geometry.isclose(source):
        raise PairingError("label map and its source image have different geometry")
    return resample(labels, transform, reference, interp="nearest")


def build_mean_template(registered: list[Volume]) -> Volume:
    """Voxel-wise arithmetic mean of already-aligned intensity volumes."""
    geom = _same_grid(registered, "template")
    acc = np.zeros(geom.dims, dtype=np.float64)
    for v in registered:
        acc += v.data
    return Volume(geom, acc / len(registered))


def _counts(propagated: list[LabelVolume]) -> tuple[Geometry, np.ndarray]:
    geom = _same_grid(propagated, "fusion")
    counts = np.zeros((len(LABELS),) + tuple(geom.dims), dtype=np.int32)
    for lv in propagated:
        for c in LABELS:
            counts[c] += lv.data == c
    return geom, counts


def fuse_majority(propagated: list[LabelVolume]) -> LabelVolume:
    """Per-voxel modal label; ties go to the lowest label."""
    geom, counts = _counts(propagated)
    return LabelVolume(geom, np.argmax(counts, axis=0).astype(np.uint8))


def fuse_average(propagated: list[LabelVolume]) -> list[Volume]:
    """Per-class vote fractions ``count_c / N`` as four maps (BG, CSF, GM, WM)."""
    geom, counts = _counts(propagated)
    n = len(propagated)
    return [Volume(geom, counts[c] / n) for c in LABELS]


def argmax_probabilities(maps) -> np.ndarray:
    """Index of the largest map per voxel; ties go to the lowest class."""
    return np.argmax(np.stack([np.asarray(getattr(m, "data", m)) for m in maps]), axis=0).astype(np.uint8)


@dataclass
class ProbabilisticAtlas:
    template: Volume
    prob_maps: list[Volume]
    majority: LabelVolume
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.prob_maps) != len(LABELS):
            raise SettingsError("atlas needs one probability map per class (BG, CSF, GM, WM)")
        _same_grid([self.template, *self.prob_maps, self.majority], "atlas")

    @property
    def geometry(self) -> Geometry:
        return self.template.geometry

    def check(self, atol: float = 1e-6):
        """Verify the simplex constraint on the probability maps."""
        p = np.stack([m.data.astype(np.float64) for m in self.prob_maps])
        if p.min() < -atol or p.max() > 1 + atol:
            raise NumericalError("probability outside [0, 1]")
        if np.abs(p.sum(axis=0) - 1).max() > atol:
            raise NumericalError("probability maps do not sum to 1")
        return self

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nifti.write_volume(self.template, d / "template.nii.gz")
        for name, m in zip(PROB_NAMES, self.prob_maps):
            nifti.write_volume(m, d / f"prob_{name}.nii.gz")
        nifti.write_labels(self.majority, d / "majority.nii.gz")
        (d / "provenance.json").write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "ProbabilisticAtlas":
        d = Path(directory)
        if not (d / "template.nii.gz").exists():
            raise FileNotFoundError(f"no atlas found in {d}")
        prov = json.loads((d / "provenance.json").read_text()) if (d / "provenance.json").exists() else {}
        return cls(
            nifti.read_volume(d / "template.nii.gz"),
            [nifti.read_volume(d / f"prob_{name}.nii.gz") for name in PROB_NAMES],
            nifti.read_labels(d / "majority.nii.gz"),
            prov,
        )


def case_seeds(seed: int, n: int) -> list[int]:
    """Independent per-case seeds derived from one root seed (order-stable)."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_atlas(
    training: list[tuple[Volume, LabelVolume]],
    mode: str = "affine",
    settings: RegistrationSettings | None = None,
    seed: int = 0,
    ids: list[str] | None = None,
    workers: int = 1,
) -> ProbabilisticAtlas:
    """Build an atlas from ``(image, labels)`` pairs; see the module docstring.

    Registrations run on ``workers`` threads; each case gets its own seed from
    ``seed`` so results do not depend on the worker count.
    """
    n = len(training)
    if n < 2:
        raise SettingsError("build_atlas needs at least 2 training pairs")
    ids = list(ids) if ids is not None else [f"case{i}" for i in range(n)]
    if len(ids) != n or len(set(ids)) != n:
        raise SettingsError("ids must be unique, one per training pair")
    settings = (settings or RegistrationSettings()).validate()
    for cid, (img, lab) in zip(ids, training):
        if not img.geometry.isclose(lab.geometry):
            raise CaseError(cid, PairingError("image and labels have different geometry"))

    volumes = [img for img, _ in training]
    ref = select_reference(volumes, settings.mi_bins)
    fixed = volumes[ref]
    geom = fixed.geometry
    seeds = case_seeds(seed, n)
    logger.info("atlas reference: %s", ids[ref])

    def one(i):
        if i == ref:
            return IdentityTransform()
        try:
            return register(fixed, volumes[i], mode, settings, seeds[i])
        except Exception as exc:  # attribute the failure to its case
            raise CaseError(ids[i], exc) from exc

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        transforms = list(pool.map(one, range(n)))

    registered = [fixed if i == ref else resample(volumes[i], transforms[i], geom) for i in range(n)]
    propagated = [training[i][1] if i == ref else propagate_labels(training[i][1], transforms[i], geom)
                  for i in range(n)]
    template = build_mean_template(registered)
    probs = fuse_average(propagated)
    majority = fuse_majority(propagated)
    if not np.array_equal(argmax_probabilities(probs), majority.data):
        raise NumericalError("majority labels disagree with the argmax of the averaged maps")
    provenance = {
        "cases": ids,
        "n_cases": n,
        "reference_index": ref,
        "reference_id": ids[ref],
        "mode": mode,
        "seed": int(seed),
        "case_seeds": seeds,
        "registration": settings.to_dict(),
        "transforms": {ids[i]: transforms[i].to_dict() for i in range(n)},
    }
    return ProbabilisticAtlas(template, probs, majority, provenance).check()


def warp_probabilities(atlas: ProbabilisticAtlas, transform: Transform | None, reference: Geometry) -> np.ndarray:
    """Trilinearly warp the class maps onto ``reference`` and renormalise each voxel to sum 1.

    Voxels mapped outside the atlas get probability 1 for background.
    Returns a float64 array of shape ``(4,) + reference.dims``.
    """
    nx, ny, _ = reference.dims
    out = np.zeros((len(LABELS),) + tuple(reference.dims))
    maps = [m.data for m in atlas.prob_maps]
    for zs, idx in pullback_indices(reference, transform, atlas.geometry):
        shape = (nx, ny, zs.stop - zs.start)
        for c, m in enumerate(maps):
            out[c][:, :, zs] = interpolate_trilinear(m, idx).reshape(shape, order="F")
    total = out.sum(axis=0)
    empty = total <= 0
    out[0][empty] = 1.0
    total[empty] = 1.0
    return out / total


def segment(
    atlas: ProbabilisticAtlas,
    target: Volume,
    mode: str = "affine",
    settings: RegistrationSettings | None = None,
    seed: int = 0,
    fusion: str = "average",
    transform: Transform | None = None,
) -> LabelVolume:
    """Label ``target`` by registering the atlas template onto it.

    ``fusion="average"`` takes the per-voxel argmax of the warped probability
    maps (lowest class on ties); ``"majority"`` warps the majority label map
    with nearest neighbour. Voxels with target intensity <= 0 are background.
    A precomputed ``transform`` (target space -> atlas space) skips registration.
    """
    if fusion not in FUSIONS:
        raise SettingsError(f"fusion must be one of {FUSIONS}")
    if transform is None:
        transform = register(target, atlas.template, mode, settings, seed)
    geom = target.geometry
    if fusion == "average":
        labels = argmax_probabilities(warp_probabilities(atlas, transform, geom))
    else:
        labels = resample(atlas.majority, transform, geom, interp="nearest").data.copy()
    labels[target.data <= 0] = 0
    return LabelVolume(geom, labels)

