"""Command-line interface: ``atlasseg <command> ...``.

Every command accepts ``--seed`` and ``--config``. The config is a JSON file
whose ``n4`` / ``diffusion`` / ``registration`` sections (the same layout as a
pipeline config) supply settings; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import nifti
from .atlas import FUSIONS, ProbabilisticAtlas, build_atlas, segment
from .errors import AtlasSegError, ConfigError
from .metrics import evaluate, report_csv, write_report_csv
from .patches import AXES, extract_patches
from .phantom import PhantomSpec
from .pipeline import (
    IMAGE_PATTERN,
    LABEL_PATTERN,
    PipelineConfig,
    _settings,
    resolve_workers,
    run_pipeline,
    write_phantom_dataset,
)
from .preprocess import DiffusionSettings, N4Settings, preprocess_volume
from .registration import MODES, RegistrationSettings, register
from .volume import resample

log = logging.getLogger("atlasseg")


def _flag_type(default):
    if isinstance(default, bool):
        return None
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_settings_flags(parser, cls, prefix):
    """One ``--<prefix>-<field>`` flag per scalar settings field (default: from config / built-in)."""
    group = parser.add_argument_group(f"{prefix} settings")
    for f in fields(cls):
        default = getattr(cls(), f.name)
        flag = f"--{prefix}-{f.name.replace('_', '-')}"
        dest = f"{prefix}__{f.name}"
        if isinstance(default, bool):
            group.add_argument(flag, dest=dest, type=lambda s: s.lower() in ("1", "true", "yes"), default=None,
                               metavar="BOOL", help=f"(default {default})")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else float
            group.add_argument(flag, dest=dest, type=kind, nargs="+", default=None, help=f"(default {list(default)})")
        elif default is None:
            group.add_argument(flag, dest=dest, type=float, default=None, help="(default none)")
        else:
            group.add_argument(flag, dest=dest, type=_flag_type(default), default=None, help=f"(default {default})")


def _config_section(args, name) -> dict:
    if not args.config:
        return {}
    try:
        d = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    return d.get(name, {}) or {}


def _settings_from(args, cls, prefix, section):
    s = _settings(cls, _config_section(args, section), section)
    over = {}
    for f in fields(cls):
        v = getattr(args, f"{prefix}__{f.name}", None)
        if v is not None:
            over[f.name] = tuple(v) if isinstance(v, list) else v
    return _settings(cls, replace(s, **over).__dict__ if over else s, section)


def _common(parser):
    parser.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    parser.add_argument("--config", help="JSON file with n4 / diffusion / registration settings sections")


def cmd_preprocess(args):
    vol = nifti.read_volume(args.input)
    mask = nifti.read_labels(args.mask) if args.mask else None
    n4 = _settings_from(args, N4Settings, "n4", "n4")
    diff = _settings_from(args, DiffusionSettings, "diffusion", "diffusion")
    out, bias = preprocess_volume(vol, n4, diff, args.skip_n4, args.skip_diffusion, mask=mask)
    nifti.write_volume(out, args.output)
    if args.save_field:
        if bias is None:
            log.warning("--save-field ignored: N4 was skipped")
        else:
            nifti.write_volume(bias, args.save_field)
    return 0


def cmd_register(args):
    fixed = nifti.read_volume(args.fixed)
    moving = nifti.read_volume(args.moving)
    settings = _settings_from(args, RegistrationSettings, "reg", "registration")
    t = register(fixed, moving, args.mode, settings, args.seed)
    t.save(args.out)
    if args.resampled:
        nifti.write_volume(resample(moving, t, fixed.geometry), args.resampled)
    return 0


def _discover(train_dir: Path, image_pattern, label_pattern):
    ids = []
    for d in sorted(p.name for p in train_dir.iterdir() if p.is_dir()):
        if (train_dir / image_pattern.format(case=d)).is_file() and (train_dir / label_pattern.format(case=d)).is_file():
            ids.append(d)
    return ids


def cmd_build_atlas(args):
    root = Path(args.train_dir)
    ids = args.ids or _discover(root, args.image_pattern, args.label_pattern)
    if len(ids) < 2:
        raise ConfigError(f"need at least 2 training cases under {root}, found {len(ids)}")
    training = [(nifti.read_volume(root / args.image_pattern.format(case=c)),
                 nifti.read_labels(root / args.label_pattern.format(case=c))) for c in ids]
    settings = _settings_from(args, RegistrationSettings, "reg", "registration")
    atlas = build_atlas(training, args.mode, settings, args.seed, ids=ids, workers=resolve_workers(args.workers))
    atlas.save(args.out)
    return 0


def cmd_segment(args):
    atlas = ProbabilisticAtlas.load(args.atlas)
    target = nifti.read_volume(args.target)
    settings = _settings_from(args, RegistrationSettings, "reg", "registration")
    t = register(target, atlas.template, args.mode, settings, args.seed)
    if args.save_transform:
        t.save(args.save_transform)
    nifti.write_labels(segment(atlas, target, args.mode, fusion=args.fusion, transform=t), args.out)
    return 0


def _strip_ext(name: str) -> str:
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def cmd_evaluate(args):
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise ConfigError("--pred and --gt must both be files or both be directories")
    if pred.is_dir():
        pairs = [(_strip_ext(p.name), p, gt / p.name) for p in sorted(pred.iterdir())
                 if p.name.endswith((".nii", ".nii.gz"))]
        missing = [str(g) for _, _, g in pairs if not g.is_file()]
        if missing or not pairs:
            raise ConfigError(f"unpaired predictions: {missing}" if missing else f"no NIfTI files in {pred}")
    else:
        pairs = [(args.case or _strip_ext(pred.name), pred, gt)]
    reports = [evaluate(nifti.read_labels(p), nifti.read_labels(g), case, surface=args.surface)
               for case, p, g in pairs]
    if args.csv:
        write_report_csv(reports, args.csv)
    else:
        sys.stdout.write(report_csv(reports))
    return 0


def cmd_extract_patches(args):
    vol = nifti.read_volume(args.input)
    lab = nifti.read_labels(args.labels)
    case = args.case or _strip_ext(Path(args.input).name)
    ps = extract_patches(vol, lab, args.size, args.stride, args.axis, args.min_tissue, case)
    ps.save(args.out, name=case)
    print(f"{case}: {len(ps)} patches")
    return 0


def cmd_phantom(args):
    base = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else None
    ids = write_phantom_dataset(args.out, args.seeds, base, prefix=args.prefix)
    print("\n".join(ids))
    return 0


def cmd_run(args):
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = PipelineConfig.load(args.config)
    if args.seed_given:
        cfg.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = run_pipeline(cfg, workers=args.workers)
    for err in result.errors:
        print(f"error: {err['stage']} {err['case'] or ''} {err['mode'] or ''}: {err['error']}", file=sys.stderr)
    print((Path(cfg.output_dir) / "summary.csv").read_text(), end="")
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atlasseg", description="Probabilistic-atlas brain tissue segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="N4 bias correction + anisotropic diffusion")
    _common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--save-field")
    s.add_argument("--mask", help="label/mask volume; default is intensity > 0")
    s.add_argument("--skip-n4", action="store_true")
    s.add_argument("--skip-diffusion", action="store_true")
    _add_settings_flags(s, N4Settings, "n4")
    _add_settings_flags(s, DiffusionSettings, "diffusion")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("register", help="register a moving image onto a fixed image")
    _common(s)
    s.add_argument("--fixed", required=True)
    s.add_argument("--moving", required=True)
    s.add_argument("--mode", choices=MODES, default="affine")
    s.add_argument("--out", required=True, help="transform JSON")
    s.add_argument("--resampled", help="also write the moving image resampled onto the fixed grid")
    _add_settings_flags(s, RegistrationSettings, "reg")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("build-atlas", help="build a probabilistic atlas from labelled cases")
    _common(s)
    s.add_argument("--train-dir", required=True)
    s.add_argument("--mode", choices=MODES, default="affine")
    s.add_argument("--out", required=True)
    s.add_argument("--ids", nargs="+", help="case ids (default: every complete case directory)")
    s.add_argument("--image-pattern", default=IMAGE_PATTERN)
    s.add_argument("--label-pattern", default=LABEL_PATTERN)
    s.add_argument("--workers", type=int)
    _add_settings_flags(s, RegistrationSettings, "reg")
    s.set_defaults(func=cmd_build_atlas)

    s = sub.add_parser("segment", help="segment a volume with a saved atlas")
    _common(s)
    s.add_argument("--atlas", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES, default="affine")
    s.add_argument("--fusion", choices=FUSIONS, default="average")
    s.add_argument("--save-transform")
    _add_settings_flags(s, RegistrationSettings, "reg")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="DSC / Hausdorff / AVD of predictions against ground truth")
    _common(s)
    s.add_argument("--pred", required=True, help="label file or directory")
    s.add_argument("--gt", required=True, help="label file or directory with matching names")
    s.add_argument("--csv")
    s.add_argument("--case")
    s.add_argument("--surface", action="store_true", help="boundary-voxel Hausdorff instead of full sets")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("extract-patches", help="2D tissue patches from a volume and its labels")
    _common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, nargs="+", default=[32])
    s.add_argument("--stride", type=int, nargs="+", default=[32])
    s.add_argument("--axis", choices=sorted(AXES), default="z")
    s.add_argument("--min-tissue", type=int, default=1)
    s.add_argument("--case")
    s.set_defaults(func=cmd_extract_patches)

    s = sub.add_parser("phantom", help="write a synthetic phantom cohort in the dataset layout")
    _common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[11, 12, 13, 14])
    s.add_argument("--prefix", default="phantom")
    s.add_argument("--spec", help="JSON file with a base phantom spec")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("run", help="full pipeline from a config file")
    _common(s)
    s.add_argument("--output-dir")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_run)
    return p


def _pair_or_int(v):
    return v[0] if len(v) == 1 else tuple(v)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.seed_given = "--seed" in argv or any(a.startswith("--seed=") for a in argv)
    if hasattr(args, "size"):
        args.size, args.stride = _pair_or_int(args.size), _pair_or_int(args.stride)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AtlasSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
