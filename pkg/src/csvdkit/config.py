"""Pipeline configuration: one YAML file, full defaults, dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .anatomy import DEFAULT_CAP_MM, ZoneConfig
from .calibrate import CalibrationParams
from .kernels.losses import DEFAULT_DS_WEIGHTS, DEFAULT_EPS, TverskyParams, UncertaintyState
from .kernels.skeleton import DEFAULT_ITERATIONS
from .matching import MatchRule

SCHEMA_VERSION = 1
TASKS = ("lacune", "epvs")

DEFAULTS: dict[str, Any] = {
    "calibration": {
        "base": 0.5,
        "lambda": 0.5,
        "gamma": 0.5,
        "connectivity": 26,
        "min_voxels": 1,
        "distance_cap_mm": DEFAULT_CAP_MM,
        "apply_to": list(TASKS),
    },
    "zone_config_path": None,
    "matching": {
        "lacune": {"kind": "centroid_distance", "threshold": 5.0},
        "epvs": {"kind": "iou", "threshold": 0.10},
    },
    "nsd_tolerance_mm": 1.0,
    "bootstrap": {"iters": 2000, "seed": 0},
    "kernels": {
        "tversky_alpha": 0.1,
        "tversky_beta": 0.9,
        "epsilon": DEFAULT_EPS,
        "lambda_excl": 1.0,
        "skeleton_iterations": DEFAULT_ITERATIONS,
        "deep_supervision_weights": list(DEFAULT_DS_WEIGHTS),
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(raw)
    return node


class PipelineConfig:
    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.values = _merge(DEFAULTS, values or {})
        self.base_dir = base_dir
        self.validate()

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = ()) -> "PipelineConfig":
        values: dict = {}
        base_dir = None
        if path is not None:
            try:
                with open(path) as fh:
                    values = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError("config file must hold a mapping")
            values.pop("schema_version", None)
            base_dir = Path(path).parent
        merged = _merge(DEFAULTS, values)
        for o in overrides:
            merged = _merge(merged, parse_override(o))
        return cls(merged, base_dir)

    def validate(self) -> None:
        try:
            self.calibration_params()
            self.tversky_params()
            self.uncertainty_state()
            for task in TASKS:
                self.match_rule(task)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cal = self.values["calibration"]
        if not float(cal["distance_cap_mm"]) > 0:
            raise ConfigError("calibration.distance_cap_mm must be positive")
        bad = set(cal["apply_to"]) - set(TASKS)
        if bad:
            raise ConfigError(f"calibration.apply_to has unknown tasks {sorted(bad)}")
        if not float(self.values["nsd_tolerance_mm"]) > 0:
            raise ConfigError("nsd_tolerance_mm must be positive")
        bs = self.values["bootstrap"]
        if int(bs["iters"]) < 1:
            raise ConfigError("bootstrap.iters must be >= 1")
        k = self.values["kernels"]
        if int(k["skeleton_iterations"]) < 0:
            raise ConfigError("kernels.skeleton_iterations must be >= 0")
        w = k["deep_supervision_weights"]
        if any(float(x) < 0 for x in w) or not sum(float(x) for x in w) > 0:
            raise ConfigError("deep_supervision_weights must be non-negative with a positive sum")

    def calibration_params(self) -> CalibrationParams:
        c = self.values["calibration"]
        return CalibrationParams(
            base=float(c["base"]),
            lam=float(c["lambda"]),
            gamma=float(c["gamma"]),
            connectivity=int(c["connectivity"]),
            min_voxels=int(c["min_voxels"]),
        )

    @property
    def distance_cap(self) -> float:
        return float(self.values["calibration"]["distance_cap_mm"])

    def zone_config(self) -> ZoneConfig:
        p = self.values["zone_config_path"]
        if p is None:
            return ZoneConfig.default()
        path = Path(p)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return ZoneConfig.load(path)

    def match_rule(self, task: str) -> MatchRule:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        m = self.values["matching"][task]
        return MatchRule(m["kind"], float(m["threshold"]))

    def tversky_params(self) -> TverskyParams:
        k = self.values["kernels"]
        return TverskyParams(float(k["tversky_alpha"]), float(k["tversky_beta"]), float(k["epsilon"]))

    def uncertainty_state(self) -> UncertaintyState:
        return UncertaintyState(0.0, 0.0, float(self.values["kernels"]["lambda_excl"]))

    def resolved(self) -> dict:
        """Full config with the zone table inlined, as embedded in reports."""
        out = {"schema_version": SCHEMA_VERSION, **copy.deepcopy(self.values)}
        out["zones"] = self.zone_config().to_dict()
        return out

    def sha256(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump({"schema_version": SCHEMA_VERSION, **self.values}, sort_keys=False)
