"""End-to-end orchestration: preprocess, build atlases, segment and score a split dataset.

A run is fully described by a :class:`PipelineConfig` (one JSON file). Every
setting is written back, defaults included, to ``<output_dir>/config.json`` so
the run can be repeated from that file alone. Layout of the output directory::

    config.json
    preprocessed/<case>.nii.gz, <case>_field.nii.gz
    <mode>/atlas/...                  (built from the train split only)
    <mode>/transforms/<case>.json     (test case -> atlas space)
    <mode>/<fusion>/<case>_seg.nii.gz
    <mode>/<fusion>/report.csv        (per case and class, then mean/std rows)
    summary.csv                       (cohort mean/std per mode, fusion, class)
    errors.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nifti
from .atlas import FUSIONS, ProbabilisticAtlas, build_atlas, segment
from .errors import ConfigError, PairingError
from .metrics import METRICS, TISSUES, cohort_summary, evaluate, report_csv
from .phantom import PhantomSpec, cohort_spec, generate_phantom
from .preprocess import DiffusionSettings, N4Settings, preprocess_volume
from .registration import MODES, RegistrationSettings, register
from .volume import CLASS_NAMES

logger = logging.getLogger(__name__)

WORKERS_ENV = "ATLASSEG_WORKERS"
IMAGE_PATTERN = "{case}/{case}_ana_strip.nii.gz"
LABEL_PATTERN = "{case}/{case}_segTRI_ana.nii.gz"


def _settings(cls, d, name):
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    extra = set(d or {}) - known
    if extra:
        raise ConfigError(f"unknown {name} settings: {sorted(extra)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in (d or {}).items()}
    try:
        return cls(**d).validate()
    except Exception as exc:  # SettingsError or a TypeError from bad values
        raise ConfigError(f"invalid {name} settings: {exc}") from exc


def _plain(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}


@dataclass
class PipelineConfig:
    dataset_root: str
    train: list
    test: list
    output_dir: str
    val: list = field(default_factory=list)
    image_pattern: str = IMAGE_PATTERN
    label_pattern: str = LABEL_PATTERN
    seed: int = 0
    modes: list = field(default_factory=lambda: ["affine"])
    fusions: list = field(default_factory=lambda: list(FUSIONS))
    skip_n4: bool = False
    skip_diffusion: bool = False
    n4: N4Settings = field(default_factory=N4Settings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    registration: RegistrationSettings = field(default_factory=RegistrationSettings)
    hausdorff_surface: bool = False
    workers: int = 1

    def __post_init__(self):
        self.n4 = _settings(N4Settings, self.n4, "n4")
        self.diffusion = _settings(DiffusionSettings, self.diffusion, "diffusion")
        self.registration = _settings(RegistrationSettings, self.registration, "registration")
        for name in ("train", "val", "test", "modes", "fusions"):
            setattr(self, name, [str(x) for x in getattr(self, name)])

    def image_path(self, case: str) -> Path:
        return Path(self.dataset_root) / self.image_pattern.format(case=case)

    def label_path(self, case: str) -> Path:
        return Path(self.dataset_root) / self.label_pattern.format(case=case)

    def validate(self, check_files: bool = True) -> "PipelineConfig":
        splits = {"train": self.train, "val": self.val, "test": self.test}
        for name, ids in splits.items():
            if len(set(ids)) != len(ids):
                raise ConfigError(f"duplicate case ids in {name} split")
        names = list(splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = set(splits[a]) & set(splits[b])
                if common:
                    raise ConfigError(f"splits {a} and {b} share cases: {sorted(common)}")
        if len(self.train) < 2:
            raise ConfigError("the train split needs at least 2 cases to build an atlas")
        if not self.test:
            raise ConfigError("the test split is empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {self.modes}")
        bad = [f for f in self.fusions if f not in FUSIONS]
        if bad or not self.fusions:
            raise ConfigError(f"fusions must be a non-empty subset of {FUSIONS}, got {self.fusions}")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")
        if check_files:
            missing = [str(p) for c in self.train + self.val + self.test
                       for p in (self.image_path(c), self.label_path(c)) if not p.is_file()]
            if missing:
                raise ConfigError(f"missing input files: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["n4"] = _plain(self.n4)
        d["diffusion"] = _plain(self.diffusion)
        d["registration"] = self.registration.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        missing = {"dataset_root", "train", "test", "output_dir"} - set(d)
        if missing:
            raise ConfigError(f"config is missing required keys: {sorted(missing)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def resolve_workers(workers: int | None = None, default: int = 1) -> int:
    """Explicit value, else the ``ATLASSEG_WORKERS`` environment variable, else ``default``."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return max(1, int(default))


@dataclass
class PipelineResult:
    output_dir: Path
    reports: dict  # (mode, fusion) -> list[MetricsReport]
    errors: list
    report_paths: dict

    @property
    def ok(self) -> bool:
        return not self.errors


def _error(stage, case, exc, mode=None) -> dict:
    return {"stage": stage, "case": case, "mode": mode, "error": f"{type(exc).__name__}: {exc}"}


def summary_csv(reports: dict) -> str:
    """Cohort mean and population std per mode, fusion and class, one row each."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["mode", "fusion", "class", "n"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for (mode, fusion), reps in reports.items():
        if not reps:
            continue
        s = cohort_summary(reps)
        for name in [CLASS_NAMES[c] for c in TISSUES] + ["mean"]:
            row = [mode, fusion, name, s[("dsc", name)][2]]
            for m in METRICS:
                mean, std, _ = s[(m, name)]
                row += ["" if np.isnan(mean) else repr(mean), "" if np.isnan(std) else repr(std)]
            w.writerow(row)
    return buf.getvalue()


def _case_seed(seed: int, stage: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), stage, index]).generate_state(1)[0])


def run_pipeline(config: PipelineConfig, workers: int | None = None) -> PipelineResult:
    """Run the whole pipeline; per-case failures are collected in ``errors.json`` and skipped."""
    config.validate()
    n_workers = resolve_workers(workers, config.workers)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    errors: list = []

    # preprocessing, one case per worker
    cases = config.train + config.test
    pre_dir = out / "preprocessed"
    pre_dir.mkdir(exist_ok=True)

    def prep(case):
        img = nifti.read_volume(config.image_path(case))
        lab = nifti.read_labels(config.label_path(case))
        if not img.geometry.isclose(lab.geometry):
            raise PairingError("image and label map have different geometry")
        vol, bias = preprocess_volume(img, config.n4, config.diffusion, config.skip_n4, config.skip_diffusion)
        nifti.write_volume(vol, pre_dir / f"{case}.nii.gz")
        if bias is not None:
            nifti.write_volume(bias, pre_dir / f"{case}_field.nii.gz")
        return vol, lab

    def guarded(fn, stage, mode=None):
        def run(case):
            try:
                return fn(case)
            except Exception as exc:  # isolate the failure to this case
                logger.warning("%s failed for %s: %s", stage, case, exc)
                return exc
        return run

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        prepared = dict(zip(cases, pool.map(guarded(prep, "preprocess"), cases)))
    for case in cases:
        if isinstance(prepared[case], Exception):
            errors.append(_error("preprocess", case, prepared[case]))
    train = [c for c in config.train if not isinstance(prepared[c], Exception)]
    test = [c for c in config.test if not isinstance(prepared[c], Exception)]

    reports: dict = {}
    paths: dict = {}
    for mi, mode in enumerate(config.modes):
        mode_dir = out / mode
        try:
            atlas = build_atlas([prepared[c] for c in train], mode, config.registration, config.seed,
                                ids=train, workers=n_workers)
        except Exception as exc:
            case = getattr(exc, "case", None)
            errors.append(_error("build_atlas", case, exc, mode))
            for fusion in config.fusions:
                reports[(mode, fusion)] = []
            continue
        atlas.save(mode_dir / "atlas")
        tdir = mode_dir / "transforms"
        tdir.mkdir(exist_ok=True)
        seeds = {c: _case_seed(config.seed, mi + 1, i) for i, c in enumerate(test)}

        def seg(case, atlas=atlas, mode=mode, mode_dir=mode_dir, tdir=tdir, seeds=seeds):
            target, gt = prepared[case]
            t = register(target, atlas.template, mode, config.registration, seeds[case])
            t.save(tdir / f"{case}.json")
            out_reports = {}
            for fusion in config.fusions:
                pred = segment(atlas, target, mode, fusion=fusion, transform=t)
                fdir = mode_dir / fusion
                fdir.mkdir(exist_ok=True)
                nifti.write_labels(pred, fdir / f"{case}_seg.nii.gz")
                out_reports[fusion] = evaluate(pred, gt, case, surface=config.hausdorff_surface)
            return out_reports

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(guarded(seg, "segment", mode), test))
        for fusion in config.fusions:
            reports[(mode, fusion)] = []
        for case, res in zip(test, results):
            if isinstance(res, Exception):
                errors.append(_error("segment", case, res, mode))
                continue
            for fusion in config.fusions:
                reports[(mode, fusion)].append(res[fusion])
        for fusion in config.fusions:
            p = mode_dir / fusion / "report.csv"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(report_csv(reports[(mode, fusion)]))
            paths[(mode, fusion)] = p

    (out / "summary.csv").write_text(summary_csv(reports))
    (out / "errors.json").write_text(json.dumps(errors, indent=2) + "\n")
    return PipelineResult(out, reports, errors, paths)


def write_phantom_dataset(root, seeds=(11, 12, 13, 14), base: PhantomSpec | None = None,
                          prefix: str = "phantom") -> list[str]:
    """Write one subject-like phantom per seed using the dataset's file layout; returns case ids."""
    root = Path(root)
    ids = []
    for s in seeds:
        case = f"{prefix}{int(s):03d}"
        img, lab = generate_phantom(cohort_spec(int(s), base))
        d = root / case
        d.mkdir(parents=True, exist_ok=True)
        nifti.write_volume(img, root / IMAGE_PATTERN.format(case=case))
        nifti.write_labels(lab, root / LABEL_PATTERN.format(case=case))
        ids.append(case)
    return ids


def phantom_config(root, output_dir, seeds=(11, 12, 13, 14), n_train: int = 3, base: PhantomSpec | None = None,
                   **overrides) -> PipelineConfig:
    """Write a phantom cohort under ``root`` and return a train/test config for it."""
    ids = write_phantom_dataset(root, seeds, base)
    return PipelineConfig(dataset_root=str(root), train=ids[:n_train], test=ids[n_train:],
                          output_dir=str(output_dir), **overrides)


def load_atlas(directory) -> ProbabilisticAtlas:
    return ProbabilisticAtlas.load(directory)
