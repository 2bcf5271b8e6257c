"""Command-line entry point: ``csvdkit <command> ...``.

Exit codes: 0 success, 2 bad input (I/O, geometry, malformed files, config),
3 a kernel self-check failed, 4 a cohort statistic was undefined (the report
is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anatomy import ZoneConfig, ZoneError, build_zone_map, distance_field
from .calibrate import adaptive_threshold, binarize, connected_components, lesions_mask
from .cohort import (
    ManifestError,
    StatError,
    bootstrap_ci,
    read_manifest,
    wilcoxon_signed_rank,
)
from .config import TASKS, ConfigError, PipelineConfig
from .kernels import suite
from .kernels.losses import ShapeError, cldice_loss, exclusion_loss, tversky_loss
from .kernels.skeleton import soft_skeleton
from .kernels.tensorio import read_tensor, write_tensor
from .matching import evaluate_case
from .nifti import NiftiError, load_volume, save_volume
from .reports import envelope, write_csv, write_json
from .volume import GeometryError, VolumeError, as_labels, as_mask, as_prob, assert_same_geometry

EXIT_OK, EXIT_INPUT, EXIT_CHECK, EXIT_STAT = 0, 2, 3, 4
WORKERS_ENV = "CSVDKIT_WORKERS"

INPUT_ERRORS = (
    OSError,
    NiftiError,
    GeometryError,
    VolumeError,
    ConfigError,
    ZoneError,
    ManifestError,
    StatError,
    ShapeError,
)

log = logging.getLogger("csvdkit")


class CheckFailed(RuntimeError):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(getattr(args, "config", None), getattr(args, "set", None) or [])


# -- calibrate ---------------------------------------------------------------


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    prob = as_prob(load_volume(args.prob))
    anatomy = as_labels(load_volume(args.anatomy))
    assert_same_geometry(prob, anatomy)
    params = cfg.calibration_params()
    zones = build_zone_map(anatomy, cfg.zone_config())
    calibrated = args.task in cfg.values["calibration"]["apply_to"]
    if calibrated:
        D = distance_field(zones, cfg.distance_cap, workers=args.workers)
        T = adaptive_threshold(D, zones, params)
    else:
        T = prob.with_data(np.full(prob.dims, params.base))
    mask = binarize(prob, T)
    lesions = connected_components(mask, params, zones)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask_name = "mask.nii.gz"
    if params.min_voxels > 1:
        mask = lesions_mask(lesions, mask)
    save_volume(mask, out / mask_name)
    outputs = {"mask": mask_name}
    if args.save_maps:
        save_volume(T, out / "threshold.nii.gz")
        outputs["threshold"] = "threshold.nii.gz"
        if calibrated:
            save_volume(D.grid, out / "distance.nii.gz")
            outputs["distance"] = "distance.nii.gz"
    report = envelope(
        "calibrate",
        cfg,
        {
            "inputs": {"prob": Path(args.prob).name, "anatomy": Path(args.anatomy).name},
            "outputs": outputs,
            "n_lesions": len(lesions),
            "lesions": [les.to_dict() for les in lesions],
        },
        task=args.task,
        calibrated=calibrated,
    )
    write_json(report, out / "lesions.json")
    return EXIT_OK


# -- eval-case ---------------------------------------------------------------


def case_report(pred_path, gt_path, task: str, cfg: PipelineConfig, case_id: str | None = None) -> dict:
    pred = as_mask(load_volume(pred_path), threshold=0.0)
    gt = as_mask(load_volume(gt_path), threshold=0.0)
    assert_same_geometry(pred, gt)
    params = cfg.calibration_params()
    rule = cfg.match_rule(task)
    pl = connected_components(pred, params)
    gl = connected_components(gt, params)
    result, metrics = evaluate_case(pl, gl, pred, gt, rule, float(cfg.values["nsd_tolerance_mm"]))
    return envelope(
        "eval-case",
        cfg,
        {
            "rule": {"kind": rule.kind, "threshold": rule.threshold, "assignment": "greedy best-first, one-to-one"},
            "pred_lesions": [l.to_dict() for l in pl],
            "gt_lesions": [l.to_dict() for l in gl],
            "detection": result.to_dict(),
            "metrics": metrics.to_dict(),
        },
        task=task,
        case_id=case_id or Path(pred_path).name,
    )


def cmd_eval_case(args) -> int:
    cfg = _config(args)
    report = case_report(args.pred, args.gt, args.task, cfg, args.case_id)
    write_json(report, args.out)
    if args.csv:
        m = report["metrics"]
        write_csv([{"case_id": report["case_id"], "task": args.task, **m}], args.csv, append=True)
    return EXIT_OK


# -- eval-cohort -------------------------------------------------------------

GLOBAL_REGIONS = {None, "global", "all"}


def _stat(values, statistic, cfg, workers, extra=None) -> dict:
    bs = cfg.values["bootstrap"]
    try:
        res = bootstrap_ci(values, statistic, int(bs["iters"]), int(bs["seed"]), workers=workers).to_dict()
    except StatError as exc:
        return {"statistic": statistic, "error": str(exc)}
    return {"statistic": statistic, **res, **(extra or {})}


def cohort_report(manifest, cfg: PipelineConfig, workers: int = 1) -> dict:
    records = read_manifest(manifest)
    glob = [r for r in records if (r.region or "").lower() in {"", "global", "all"}]
    regions: dict[str, list] = {}
    for r in records:
        if r in glob:
            continue
        regions.setdefault(r.region, []).append(r)

    stats: list[dict] = []
    if glob:
        pres = np.array([[r.presence_pred, r.presence_true] for r in glob], dtype=float)
        counts = np.array([[r.pred_count, r.true_count] for r in glob])
        abs_err = np.abs(counts[:, 0] - counts[:, 1])
        sd = float(abs_err.std(ddof=1)) if len(abs_err) > 1 else 0.0
        stats.append({"region": "global", **_stat(pres, "balanced_accuracy", cfg, workers)})
        stats.append({"region": "global", **_stat(counts, "mae", cfg, workers, {"cross_case_sd": sd})})
        stats.append({"region": "global", **_stat(counts, "pearson", cfg, workers)})
    for name, rows in regions.items():
        vals = np.array([[r.pred_count, r.true_count] for r in rows])
        stats.append({"region": name, **_stat(vals, "spearman", cfg, workers)})
    body = {
        "n_records": len(records),
        "n_global": len(glob),
        "regions": {k: len(v) for k, v in regions.items()},
        "intervals": "percentile bootstrap over subjects; cross_case_sd is the sample SD of per-subject values",
        "statistics": stats,
    }
    return envelope("eval-cohort", cfg, body, manifest=Path(manifest).name)


def cmd_eval_cohort(args) -> int:
    cfg = _config(args)
    report = cohort_report(args.manifest, cfg, args.workers)
    write_json(report, args.out)
    if args.csv:
        cols = ("region", "statistic", "n", "point", "ci_low", "ci_high", "bootstrap_sd", "cross_case_sd", "error")
        write_csv([{c: s.get(c) for c in cols} for s in report["statistics"]], args.csv)
    return EXIT_STAT if any("error" in s for s in report["statistics"]) else EXIT_OK


# -- stats -------------------------------------------------------------------

_ID_COLUMNS = {"id", "case", "case_id", "subject", "subject_id"}


def read_pairs(path, col_a=None, col_b=None) -> tuple[np.ndarray, np.ndarray, tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if col_a is None or col_b is None:
            data_cols = [f for f in fields if f.strip().lower() not in _ID_COLUMNS]
            if len(data_cols) < 2:
                raise ManifestError("line 1: need two score columns")
            col_a, col_b = col_a or data_cols[0], col_b or data_cols[1]
        for c in (col_a, col_b):
            if c not in fields:
                raise ManifestError(f"line 1: no column {c!r}")
        a, b = [], []
        for row in reader:
            try:
                a.append(float(row[col_a]))
                b.append(float(row[col_b]))
            except (TypeError, ValueError):
                raise ManifestError(f"line {reader.line_num}: non-numeric score") from None
    if not a:
        raise ManifestError("no rows")
    return np.array(a), np.array(b), (col_a, col_b)


def cmd_stats(args) -> int:
    a, b, cols = read_pairs(args.pairs, args.col_a, args.col_b)
    res = wilcoxon_signed_rank(a, b)
    report = {
        "schema_version": 1,
        "command": "stats",
        "test": "wilcoxon_signed_rank",
        "alternative": "two-sided",
        "columns": list(cols),
        **res.to_dict(),
        "normal_approximation": res.method == "normal",
        "significant_at_0.05": res.p_value < 0.05,
    }
    write_json(report, args.out)
    return EXIT_OK


# -- kernels -----------------------------------------------------------------


def cmd_check_kernels(args) -> int:
    results = suite.run_kernel_checks(args.seed, perturb_gradient=args.perturb_gradient)
    report = {"schema_version": 1, "command": "check-kernels", "seed": args.seed, **suite.report(results)}
    write_json(report, args.out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(json.dumps({"error": "CheckFailed", "failed_checks": failed}), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_skeletonize(args) -> int:
    t, grid = read_tensor(args.input)
    if t.min() < 0 or t.max() > 1:
        raise VolumeError("skeleton input must lie in [0, 1]")
    write_tensor(soft_skeleton(t, args.iterations), args.output, like=grid)
    return EXIT_OK


def cmd_kernel(args) -> int:
    cfg = _config(args)
    p, grid = read_tensor(args.pred)
    q, _ = read_tensor(args.target)
    valid = read_tensor(args.valid)[0] if args.valid else None
    k = cfg.values["kernels"]
    body: dict = {"kernel": args.name}
    if args.name == "tversky":
        value, grad = tversky_loss(p, q, valid, cfg.tversky_params())
    elif args.name == "cldice":
        value, grad = cldice_loss(p, q, int(k["skeleton_iterations"]), float(k["epsilon"]), valid)
    else:
        value, grad, grad_b = exclusion_loss(p, q)
    body["value"] = value
    if args.grad_out:
        write_tensor(grad, args.grad_out, like=grid)
        body["gradient"] = Path(args.grad_out).name
    write_json({"schema_version": 1, "command": "kernel", **body}, args.out)
    return EXIT_OK


def cmd_config(args) -> int:
    if args.zones:
        import yaml

        print(yaml.safe_dump(ZoneConfig.default().to_dict(), default_flow_style=None, sort_keys=False), end="")
    else:
        print(_config(args).dump(), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="pipeline config YAML (defaults baked in)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key, e.g. calibration.lambda=0.3")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csvdkit", description="Anatomy-calibrated lesion detection and evaluation toolkit.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="anatomy-calibrated binarization + lesion extraction")
    p.add_argument("prob", help="probability map (NIfTI-1)")
    p.add_argument("anatomy", help="parcellation label volume (NIfTI-1)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", choices=TASKS, default="lacune")
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--save-maps", action="store_true", help="also write threshold and distance maps")
    _add_config(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval-case", help="match lesions and score one case")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--case-id")
    p.add_argument("--out", default="-")
    p.add_argument("--csv", help="append a metrics row to this CSV")
    _add_config(p)
    p.set_defaults(func=cmd_eval_case)

    p = sub.add_parser("eval-cohort", help="cohort agreement statistics with bootstrap CIs")
    p.add_argument("manifest")
    p.add_argument("--out", default="-")
    p.add_argument("--csv")
    p.add_argument("--workers", type=int, default=default_workers())
    _add_config(p)
    p.set_defaults(func=cmd_eval_cohort)

    p = sub.add_parser("stats", help="paired Wilcoxon signed-rank test")
    p.add_argument("pairs", help="CSV with two paired score columns")
    p.add_argument("--col-a")
    p.add_argument("--col-b")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("check-kernels", help="run the kernel verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_kernels)

    p = sub.add_parser("skeletonize", help="soft skeleton of a probability tensor")
    p.add_argument("input", help="NIfTI-1 volume or .t4d tensor blob")
    p.add_argument("output")
    p.add_argument("--iterations", type=int, default=5)
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("kernel", help="evaluate a loss kernel on stored tensors")
    p.add_argument("name", choices=("tversky", "cldice", "exclusion"))
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True, help="ground truth (or the lacune map for exclusion)")
    p.add_argument("--valid")
    p.add_argument("--grad-out", help="write the gradient wrt --pred here")
    p.add_argument("--out", default="-")
    _add_config(p)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("config", help="print the default (or resolved) config")
    p.add_argument("--zones", action="store_true", help="print the default zone table instead")
    _add_config(p)
    p.set_defaults(func=cmd_config)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS + (ValueError,) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
