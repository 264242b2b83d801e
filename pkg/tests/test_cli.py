import json

import numpy as np
import pytest

from atlasseg import nifti
from atlasseg.cli import main
from atlasseg.patches import PatchSet
from atlasseg.pipeline import PipelineConfig

FAST = ["--reg-iterations", "20", "10", "5"]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"dims": [32, 32, 32], "spacing": [2.0, 2.0, 2.0]}))
    assert main(["phantom", "--out", str(root / "data"), "--seeds", "11", "12", "13", "--spec", str(spec)]) == 0
    return root


def img(cohort, case):
    return str(cohort / "data" / case / f"{case}_ana_strip.nii.gz")


def lab(cohort, case):
    return str(cohort / "data" / case / f"{case}_segTRI_ana.nii.gz")


def test_phantom_layout(cohort):
    assert sorted(p.name for p in (cohort / "data").iterdir()) == ["phantom011", "phantom012", "phantom013"]
    assert nifti.read_volume(img(cohort, "phantom011")).dims == (32, 32, 32)


def test_preprocess(cohort, tmp_path):
    out, field = tmp_path / "p.nii.gz", tmp_path / "f.nii.gz"
    rc = main(["preprocess", "--input", img(cohort, "phantom011"), "--output", str(out), "--save-field", str(field),
               "--n4-fitting-levels", "2", "--diffusion-iterations", "3"])
    assert rc == 0 and out.is_file() and field.is_file()
    src = nifti.read_volume(img(cohort, "phantom011"))
    assert np.array_equal(nifti.read_volume(out).data == 0, src.data == 0)


def test_register(cohort, tmp_path):
    rc = main(["register", "--fixed", img(cohort, "phantom011"), "--moving", img(cohort, "phantom012"),
               "--mode", "rigid", "--out", str(tmp_path / "t.json"), "--resampled", str(tmp_path / "r.nii.gz"),
               "--seed", "3", *FAST])
    assert rc == 0
    assert json.loads((tmp_path / "t.json").read_text())["type"] == "rigid"
    assert (tmp_path / "r.nii.gz").is_file()


def test_atlas_segment_evaluate(cohort, tmp_path):
    atlas = tmp_path / "atlas"
    rc = main(["build-atlas", "--train-dir", str(cohort / "data"), "--ids", "phantom011", "phantom012",
               "--mode", "affine", "--out", str(atlas), *FAST])
    assert rc == 0
    assert json.loads((atlas / "provenance.json").read_text())["cases"] == ["phantom011", "phantom012"]
    seg_dir, gt_dir = tmp_path / "seg", tmp_path / "gt"
    seg_dir.mkdir()
    gt_dir.mkdir()
    rc = main(["segment", "--atlas", str(atlas), "--target", img(cohort, "phantom013"), "--out",
               str(seg_dir / "phantom013.nii.gz"), "--save-transform", str(tmp_path / "t.json"), *FAST])
    assert rc == 0 and (tmp_path / "t.json").is_file()
    (gt_dir / "phantom013.nii.gz").write_bytes(open(lab(cohort, "phantom013"), "rb").read())
    rc = main(["evaluate", "--pred", str(seg_dir), "--gt", str(gt_dir), "--csv", str(tmp_path / "r.csv")])
    assert rc == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "case,class,dsc,hd_mm,avd_pct" and lines[1].startswith("phantom013,CSF,")
    assert float(lines[3].split(",")[2]) > 0.8  # WM dice


def test_build_atlas_discovers_cases(cohort, tmp_path):
    assert main(["build-atlas", "--train-dir", str(cohort / "data"), "--mode", "rigid", "--out",
                 str(tmp_path / "a"), *FAST]) == 0
    assert json.loads((tmp_path / "a" / "provenance.json").read_text())["n_cases"] == 3


def test_evaluate_stdout(cohort, capsys):
    assert main(["evaluate", "--pred", lab(cohort, "phantom011"), "--gt", lab(cohort, "phantom011"),
                 "--case", "self"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "self,CSF,1.0,0.0,0.0"


def test_extract_patches(cohort, tmp_path):
    rc = main(["extract-patches", "--input", img(cohort, "phantom011"), "--labels", lab(cohort, "phantom011"),
               "--out", str(tmp_path), "--size", "16", "--stride", "16", "--axis", "z"])
    assert rc == 0
    ps = PatchSet.load(tmp_path, "phantom011_ana_strip")
    assert len(ps) > 0 and ps.patch_size == (16, 16)


def test_run(cohort, tmp_path):
    cfg = PipelineConfig(dataset_root=str(cohort / "data"), train=["phantom011", "phantom012"], test=["phantom013"],
                         output_dir=str(tmp_path / "unused"), skip_n4=True, registration={"iterations": [20, 10, 5]})
    cfg.save(tmp_path / "c.json")
    rc = main(["run", "--config", str(tmp_path / "c.json"), "--output-dir", str(tmp_path / "o"), "--seed", "4"])
    assert rc == 0
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["seed"] == 4 and saved["output_dir"] == str(tmp_path / "o")
    assert (tmp_path / "o" / "summary.csv").is_file()


def test_exit_codes(cohort, tmp_path):
    # configuration problems exit 2, data/runtime problems exit 1
    (tmp_path / "bad.json").write_text("{}")
    assert main(["run", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["build-atlas", "--train-dir", str(tmp_path), "--out", str(tmp_path / "a")]) == 2
    assert main(["preprocess", "--input", str(tmp_path / "missing.nii"), "--output", str(tmp_path / "o.nii")]) == 1
    (tmp_path / "junk.nii").write_bytes(b"0" * 400)
    assert main(["evaluate", "--pred", str(tmp_path / "junk.nii"), "--gt", lab(cohort, "phantom011")]) == 1
    with pytest.raises(SystemExit):
        main(["register", "--fixed", "x"])
