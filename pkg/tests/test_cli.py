import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from csvdkit import cli
from csvdkit.cohort import balanced_accuracy, mae, pearson_r, spearman_rho
from csvdkit.nifti import load_volume, save_volume
from csvdkit.volume import VoxelGrid

from oracles import pearson

DATA = Path(__file__).parent / "data"


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def phantom(tmp_path, where="wm", p_value=0.85, name=""):
    """16^3: labels 2 (white matter) for x < 6, 3 (cortex) elsewhere; a 3^3 blob."""
    lab = np.full((16, 16, 16), 3.0)
    lab[:6] = 2
    p = np.zeros(lab.shape)
    cx = 2 if where == "wm" else 12
    p[cx - 1 : cx + 2, 7:10, 7:10] = p_value
    pp, ap = tmp_path / f"p{name}.nii.gz", tmp_path / f"a{name}.nii.gz"
    save_volume(VoxelGrid(p), pp)
    save_volume(VoxelGrid(lab), ap)
    return pp, ap


def test_calibrate_blob_in_white_matter(tmp_path, capsys):
    p, a = phantom(tmp_path)
    code, _, _ = run(["calibrate", p, a, "--out-dir", tmp_path / "o"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "o" / "lesions.json").read_text())
    assert rep["n_lesions"] == 1 and rep["lesions"][0]["voxel_count"] == 27
    assert rep["schema_version"] == 1 and len(rep["provenance"]["config_sha256"]) == 64
    assert rep["config"]["calibration"]["lambda"] == 0.5 and "zones" in rep["config"]
    mask = load_volume(tmp_path / "o" / "mask.nii.gz").data
    assert mask.sum() == 27 and mask[2, 8, 8] == 1


def test_calibrate_blob_in_cortex_is_suppressed(tmp_path, capsys):
    p, a = phantom(tmp_path, "cortex")
    assert run(["calibrate", p, a, "--out-dir", tmp_path / "o"], capsys)[0] == 0
    assert json.loads((tmp_path / "o" / "lesions.json").read_text())["lesions"] == []
    # a flag override of one config key restores the flat threshold
    run(["calibrate", p, a, "--out-dir", tmp_path / "o2", "--set", "calibration.lambda=0"], capsys)
    assert json.loads((tmp_path / "o2" / "lesions.json").read_text())["n_lesions"] == 1
    # as does excluding the task from calibration
    run(["calibrate", p, a, "--out-dir", tmp_path / "o3", "--task", "epvs", "--set", "calibration.apply_to=[lacune]"], capsys)
    rep = json.loads((tmp_path / "o3" / "lesions.json").read_text())
    assert rep["n_lesions"] == 1 and rep["calibrated"] is False


def test_calibrate_config_file(tmp_path, capsys):
    p, a = phantom(tmp_path, "cortex")
    (tmp_path / "zones.yaml").write_text("zone1: [2, 3]\n")
    (tmp_path / "cfg.yaml").write_text("zone_config_path: zones.yaml\ncalibration:\n  min_voxels: 2\n")
    code, _, _ = run(["calibrate", p, a, "--out-dir", tmp_path / "o", "--config", tmp_path / "cfg.yaml"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "o" / "lesions.json").read_text())
    assert rep["n_lesions"] == 1 and rep["config"]["zones"]["zone1"] == [2, 3]


@pytest.mark.parametrize(
    "case",
    ["missing_anatomy", "geometry", "no_zone1", "bad_override", "bad_config"],
)
def test_calibrate_input_errors(tmp_path, capsys, case):
    p, a = phantom(tmp_path)
    extra = []
    if case == "missing_anatomy":
        a = tmp_path / "nope.nii.gz"
    elif case == "geometry":
        save_volume(VoxelGrid(np.zeros((16, 16, 15))), tmp_path / "small.nii.gz")
        a = tmp_path / "small.nii.gz"
    elif case == "no_zone1":
        save_volume(VoxelGrid(np.full((16, 16, 16), 3.0)), tmp_path / "cortex.nii.gz")
        a = tmp_path / "cortex.nii.gz"
    elif case == "bad_override":
        extra = ["--set", "calibration.lamda=0.3"]
    else:
        extra = ["--config", tmp_path / "missing.yaml"]
    code, _, err = run(["calibrate", p, a, "--out-dir", tmp_path / "o", *extra], capsys)
    assert code == cli.EXIT_INPUT
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"error", "message"}


def test_calibrate_reports_are_byte_identical(tmp_path, capsys):
    p, a = phantom(tmp_path)
    for i, w in enumerate((1, 1, 3)):
        run(["calibrate", p, a, "--out-dir", tmp_path / f"o{i}", "--workers", w, "--save-maps"], capsys)
    for name in ("lesions.json", "mask.nii.gz", "threshold.nii.gz", "distance.nii.gz"):
        blobs = {(tmp_path / f"o{i}" / name).read_bytes() for i in range(3)}
        assert len(blobs) == 1, name


def masks(tmp_path, pred, gt):
    save_volume(VoxelGrid(pred), tmp_path / "pred.nii.gz")
    save_volume(VoxelGrid(gt), tmp_path / "gt.nii.gz")
    return tmp_path / "pred.nii.gz", tmp_path / "gt.nii.gz"


def test_eval_case_identical_and_empty(tmp_path, capsys):
    gt = np.zeros((10, 10, 10))
    gt[1:3, 1:3, 1:3] = 1
    gt[6:9, 6:9, 6:9] = 1
    p, g = masks(tmp_path, gt, gt)
    code, out, _ = run(["eval-case", p, g, "--task", "epvs"], capsys)
    m = json.loads(out)["metrics"]
    assert code == 0 and m["f1"] == 1.0 and m["dsc"] == 1.0 and m["nsd"] == 1.0
    p, g = masks(tmp_path, np.zeros_like(gt), gt)
    code, out, _ = run(["eval-case", p, g, "--task", "lacune"], capsys)
    assert json.loads(out)["metrics"]["recall"] == 0.0


def test_eval_case_geometry_mismatch(tmp_path, capsys):
    p, g = masks(tmp_path, np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))
    assert run(["eval-case", p, g, "--task", "lacune"], capsys)[0] == cli.EXIT_INPUT


@pytest.mark.parametrize("task", ["lacune", "epvs"])
def test_eval_case_golden(tmp_path, capsys, task):
    golden = json.loads((DATA / "golden_eval_case.json").read_text())[task]
    out = tmp_path / "r.json"
    code, _, _ = run(
        ["eval-case", DATA / "golden_pred.nii.gz", DATA / "golden_gt.nii.gz", "--task", task, "--out", out, "--csv", tmp_path / "c.csv"],
        capsys,
    )
    rep = json.loads(out.read_text())
    assert code == 0
    assert rep["detection"] == golden["detection"]
    assert rep["metrics"] == pytest.approx(golden["metrics"])
    run(["eval-case", DATA / "golden_pred.nii.gz", DATA / "golden_gt.nii.gz", "--task", task, "--out", out, "--csv", tmp_path / "c.csv"], capsys)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("case_id,task,precision")


def write_manifest(path, rows):
    lines = ["id,pred_count,true_count,presence_pred,presence_true,region"]
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def stat(report, name, region="global"):
    return next(s for s in report["statistics"] if s["statistic"] == name and s["region"] == region)


def test_eval_cohort_perfect_agreement(tmp_path, capsys):
    rows = [(f"s{i}", c, c, "", "", "") for i, c in enumerate([0, 1, 2, 0, 5, 3])]
    m = write_manifest(tmp_path / "m.csv", rows)
    code, out, _ = run(["eval-cohort", m, "--set", "bootstrap.iters=200"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert stat(rep, "balanced_accuracy")["point"] == 1.0
    assert stat(rep, "mae")["point"] == 0.0 and stat(rep, "mae")["ci_high"] == 0.0


def test_eval_cohort_constant_predictions_signal_error(tmp_path, capsys):
    rows = [(f"s{i}", 2, c, "", "", "") for i, c in enumerate([0, 1, 2, 0, 5, 3])]
    m = write_manifest(tmp_path / "m.csv", rows)
    code, out, _ = run(["eval-cohort", m, "--set", "bootstrap.iters=50", "--csv", tmp_path / "c.csv"], capsys)
    assert code == cli.EXIT_STAT
    assert "error" in stat(json.loads(out), "pearson")
    assert "pearson" in (tmp_path / "c.csv").read_text()


def test_eval_cohort_matches_direct_computation(tmp_path, capsys):
    rng = np.random.default_rng(11)
    true = rng.integers(0, 8, 10)
    pred = np.maximum(true + rng.integers(-2, 3, 10), 0)
    bg_true = rng.integers(0, 20, 10)
    bg_pred = bg_true + rng.integers(-3, 4, 10)
    rows = [(f"s{i}", pred[i], true[i], "", "", "") for i in range(10)]
    rows += [(f"s{i}", bg_pred[i], bg_true[i], "", "", "BG") for i in range(10)]
    m = write_manifest(tmp_path / "m.csv", rows)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(["eval-cohort", m, "--out", a, "--set", "bootstrap.iters=300"], capsys)
    run(["eval-cohort", m, "--out", b, "--set", "bootstrap.iters=300", "--workers", "4"], capsys)
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert stat(rep, "balanced_accuracy")["point"] == pytest.approx(balanced_accuracy(pred > 0, true > 0))
    assert stat(rep, "mae")["point"] == pytest.approx(np.mean(np.abs(pred - true)))
    assert stat(rep, "mae")["cross_case_sd"] == pytest.approx(np.std(np.abs(pred - true), ddof=1))
    assert stat(rep, "pearson")["point"] == pytest.approx(pearson(pred.tolist(), true.tolist()), abs=1e-12)
    assert stat(rep, "spearman", "BG")["point"] == pytest.approx(spearman_rho(bg_pred, bg_true))
    s = stat(rep, "pearson")
    assert s["ci_low"] <= s["point"] <= s["ci_high"] and s["iters"] == 300
    assert mae(pred, true) == stat(rep, "mae")["point"] and pearson_r(pred, true) == s["point"]


def test_eval_cohort_malformed(tmp_path, capsys):
    m = write_manifest(tmp_path / "m.csv", [("a", 1, 1, "", "", ""), ("b", "x", 1, "", "", "")])
    code, _, err = run(["eval-cohort", m], capsys)
    assert code == cli.EXIT_INPUT and "line 3" in err


def write_pairs(path, a, b):
    path.write_text("case,a,b\n" + "".join(f"c{i},{x},{y}\n" for i, (x, y) in enumerate(zip(a, b))))
    return path


def test_stats(tmp_path, capsys):
    code, out, _ = run(["stats", write_pairs(tmp_path / "p.csv", [2, 3, 4, 5, 6], [1, 1, 1, 1, 1])], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["p_value"] == 0.0625 and rep["n"] == 5 and not rep["normal_approximation"]
    code, _, _ = run(["stats", write_pairs(tmp_path / "p.csv", [1, 2], [1, 2])], capsys)
    assert code == cli.EXIT_INPUT
    rng = np.random.default_rng(0)
    code, out, _ = run(["stats", write_pairs(tmp_path / "p.csv", rng.normal(size=30), rng.normal(size=30))], capsys)
    rep = json.loads(out)
    assert rep["method"] == "normal" and rep["normal_approximation"] is True


def test_check_kernels_perturbed_fails(capsys):
    code, out, err = run(["check-kernels", "--perturb-gradient", "1e-3"], capsys)
    assert code == cli.EXIT_CHECK
    assert "tversky_gradient" in err
    rep = json.loads(out)
    assert rep["passed"] is False
    assert all("max_error" in c for c in rep["checks"])


def test_skeletonize_and_kernel(tmp_path, capsys):
    x = np.zeros((9, 5, 5))
    x[1:8, 2, 2] = 1
    save_volume(VoxelGrid(x), tmp_path / "line.nii.gz")
    assert run(["skeletonize", tmp_path / "line.nii.gz", tmp_path / "sk.nii.gz"], capsys)[0] == 0
    assert load_volume(tmp_path / "sk.nii.gz").data.tobytes() == x.tobytes()
    code, out, _ = run(
        ["kernel", "tversky", "--pred", tmp_path / "line.nii.gz", "--target", tmp_path / "line.nii.gz", "--grad-out", tmp_path / "g.t4d"],
        capsys,
    )
    assert code == 0 and json.loads(out)["value"] == pytest.approx(0.0, abs=1e-9)
    assert (tmp_path / "g.t4d").exists()


def test_config_command(capsys):
    code, out, _ = run(["config"], capsys)
    assert code == 0 and "schema_version: 1" in out and "lambda: 0.5" in out
    code, out, _ = run(["config", "--zones"], capsys)
    assert "zone1:" in out


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "csvdkit.cli", "stats", str(tmp_path / "none.csv")], capture_output=True, text=True)
    assert res.returncode == cli.EXIT_INPUT
    assert json.loads(res.stderr)["error"] == "FileNotFoundError"


def test_check_kernels_default_seed_passes(tmp_path, capsys):
    code, _, _ = run(["check-kernels", "--out", tmp_path / "k.json"], capsys)
    rep = json.loads((tmp_path / "k.json").read_text())
    assert code == 0 and rep["passed"] is True
    assert {c["name"] for c in rep["checks"]} >= {"zero_init_identity", "attention_oracle", "tversky_gradient", "cldice_gradient"}
