"""Overlap, distance and volume agreement between two tissue label maps.

All distances are in physical millimetres between voxel centres, so
anisotropic spacing is honoured. Undefined cells (e.g. Hausdorff with an
empty class) are reported as missing, never as 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import AlignmentError, UndefinedMetricError
from .volume import CLASS_NAMES, CSF, GM, WM, LabelVolume

TISSUES = (CSF, GM, WM)
METRICS = ("dsc", "hd_mm", "avd_pct")
CSV_COLUMNS = ("case", "class") + METRICS


def _check(pred: LabelVolume, gt: LabelVolume):
    if not pred.geometry.isclose(gt.geometry):
        raise AlignmentError("prediction and ground truth do not share the same geometry")


def _masks(pred: LabelVolume, gt: LabelVolume, label: int):
    _check(pred, gt)
    return pred.data == label, gt.data == label


def dice(pred: LabelVolume, gt: LabelVolume, label: int) -> float:
    """``2|A and B| / (|A| + |B|)``; 1 when both sets are empty, 0 when exactly one is."""
    a, b = _masks(pred, gt, label)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def _surface(mask: np.ndarray) -> np.ndarray:
    # voxels of the set with at least one 6-neighbour outside it (grid border counts as outside)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def _directed(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> float:
    """``max_{x in a} min_{y in b} |x - y|`` via an exact EDT of ``b``'s complement.

    The EDT only selects the nearest ``b`` voxel; the distance itself is
    recomputed from index differences so it is bit-identical to a pairwise
    evaluation of the same formula.
    """
    nearest = ndimage.distance_transform_edt(~b, sampling=spacing, return_distances=False,
                                             return_indices=True)
    src = np.argwhere(a)
    dst = nearest[(slice(None),) + tuple(src.T)].T
    d = np.sqrt(np.sum(((src - dst) * spacing) ** 2, axis=1))
    return float(d.max())


def hausdorff(pred: LabelVolume, gt: LabelVolume, label: int, surface: bool = False) -> float:
    """Symmetric Hausdorff distance (mm) between the voxel sets of ``label``.

    By default the full voxel sets are compared; ``surface=True`` restricts both
    to their boundary voxels.
    """
    a, b = _masks(pred, gt, label)
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"Hausdorff undefined for class {label}: empty set")
    if surface:
        a, b = _surface(a), _surface(b)
    spacing = np.asarray(gt.geometry.spacing, dtype=np.float64)
    return max(_directed(a, b, spacing), _directed(b, a, spacing))


def avd(pred: LabelVolume, gt: LabelVolume, label: int) -> float:
    """Absolute volume difference ``|Vp - Vgt| / Vgt * 100`` (percent)."""
    a, b = _masks(pred, gt, label)
    vox = gt.geometry.voxel_volume
    vgt = int(b.sum()) * vox
    if vgt == 0:
        raise UndefinedMetricError(f"AVD undefined for class {label}: empty ground truth")
    return abs(int(a.sum()) * vox - vgt) / vgt * 100.0


def _safe(fn, *args, **kw) -> float:
    try:
        return fn(*args, **kw)
    except UndefinedMetricError:
        return math.nan


def _nanmean(values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return math.fsum(v) / len(v) if v else math.nan


@dataclass
class MetricsReport:
    """Per-class metrics of one case; ``nan`` marks an undefined cell."""

    case: str
    values: dict = field(default_factory=dict)  # (metric, class label) -> float

    def get(self, metric: str, label: int) -> float:
        return self.values[(metric, label)]

    def mean(self, metric: str) -> float:
        """Mean over the tissue classes with a defined value."""
        return _nanmean(self.values[(metric, c)] for c in TISSUES)

    def rows(self) -> list[tuple]:
        out = []
        for c in TISSUES:
            out.append((self.case, CLASS_NAMES[c]) + tuple(self.get(m, c) for m in METRICS))
        out.append((self.case, "mean") + tuple(self.mean(m) for m in METRICS))
        return out


def evaluate(pred: LabelVolume, gt: LabelVolume, case: str = "case", surface: bool = False) -> MetricsReport:
    _check(pred, gt)
    rep = MetricsReport(case)
    for c in TISSUES:
        rep.values[("dsc", c)] = dice(pred, gt, c)
        rep.values[("hd_mm", c)] = _safe(hausdorff, pred, gt, c, surface=surface)
        rep.values[("avd_pct", c)] = _safe(avd, pred, gt, c)
    return rep


def cohort_summary(reports: list[MetricsReport]) -> dict:
    """``{(metric, class name): (mean, population std, n)}`` over cases, skipping missing cells."""
    out = {}
    for name in [CLASS_NAMES[c] for c in TISSUES] + ["mean"]:
        for m in METRICS:
            vals = []
            for r in reports:
                v = r.mean(m) if name == "mean" else r.get(m, _label_of(name))
                if not math.isnan(v):
                    vals.append(v)
            if vals:
                arr = np.asarray(vals)
                out[(m, name)] = (math.fsum(vals) / len(vals), float(np.std(arr)), len(vals))
            else:
                out[(m, name)] = (math.nan, math.nan, 0)
    return out


def _label_of(name: str) -> int:
    return {v: k for k, v in CLASS_NAMES.items()}[name]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return "" if math.isnan(v) else repr(float(v))


def report_csv(reports: list[MetricsReport], summary: bool = True) -> str:
    """CSV text with one row per case and class, then ``mean`` / ``std`` summary rows.

    Floats are written with ``repr`` so they round-trip exactly; missing cells are empty.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        for row in r.rows():
            w.writerow([_fmt(x) for x in row])
    if summary and reports:
        s = cohort_summary(reports)
        names = [CLASS_NAMES[c] for c in TISSUES] + ["mean"]
        for stat, k in (("mean", 0), ("std", 1)):
            for name in names:
                w.writerow([stat, name] + [_fmt(s[(m, name)][k]) for m in METRICS])
    return buf.getvalue()


def write_report_csv(reports: list[MetricsReport], path, summary: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(report_csv(reports, summary))


def read_report_csv(path) -> list[dict]:
    """Rows of a report CSV as dicts with floats (``nan`` for missing cells)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for m in METRICS:
            r[m] = float(r[m]) if r[m] != "" else math.nan
    return rows
