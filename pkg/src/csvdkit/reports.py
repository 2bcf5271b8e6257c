"""Report envelopes and deterministic JSON/CSV writers."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import SCHEMA_VERSION, PipelineConfig


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


_CONTAINERS = (dict, list, tuple)


def _flat(obj) -> bool:
    """True for a record whose values are scalars or lists of scalars."""
    vals = obj.values() if isinstance(obj, dict) else obj
    for v in vals:
        if isinstance(v, dict):
            return False
        if isinstance(v, (list, tuple)):
            for x in v:
                if isinstance(x, _CONTAINERS):
                    return False
    return True


def _encode(obj, level: int) -> str:
    # nested containers are indented; leaf records stay on one line (C encoder, fast for long lesion lists)
    if not isinstance(obj, _CONTAINERS) or not obj or (level > 0 and _flat(obj)):
        return json.dumps(obj, allow_nan=False, default=_default)
    pad, inner = "  " * level, "  " * (level + 1)
    if isinstance(obj, dict):
        items = [f"{inner}{json.dumps(str(k))}: {_encode(v, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    items = [inner + _encode(v, level + 1) for v in obj]
    return "[\n" + ",\n".join(items) + "\n" + pad + "]"


def dumps(obj) -> str:
    return _encode(obj, 0) + "\n"


def write_json(obj, path: str | Path | None) -> str:
    text = dumps(obj)
    if path is None or str(path) == "-":
        print(text, end="")
    else:
        Path(path).write_text(text)
    return text


def provenance(cfg: PipelineConfig) -> dict:
    return {
        "config_sha256": cfg.sha256(),
        "versions": {"csvdkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }


def envelope(command: str, cfg: PipelineConfig, body: dict, **header) -> dict:
    """Self-describing report: schema version, provenance, full resolved config, results."""
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        **header,
        "provenance": provenance(cfg),
        "config": cfg.resolved(),
        **body,
    }


def write_csv(rows: list[dict], path: str | Path, append: bool = False) -> None:
    if not rows:
        return
    path = Path(path)
    fields = list(rows[0])
    new = not (append and path.exists() and path.stat().st_size > 0)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    if new:
        writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else _default(v) if isinstance(v, np.generic) else v) for k, v in r.items()})
    with open(path, "a" if not new else "w", newline="") as fh:
        fh.write(buf.getvalue())
