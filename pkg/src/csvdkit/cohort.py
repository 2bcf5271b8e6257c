"""Cohort-level statistics: clinical agreement metrics, bootstrap CIs, Wilcoxon test.

Bootstrap resamples are drawn with numpy's PCG64 generator. Iteration ``i``
uses ``SeedSequence(seed, spawn_key=(i,))``, so every resample is fixed by
``(seed, i)`` alone and results do not depend on how iterations are split
across workers.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class StatError(ValueError):
    """A statistic is undefined for the given data."""


class ManifestError(ValueError):
    pass


@dataclass
class SubjectRecord:
    id: str
    pred_count: float
    true_count: float
    presence_pred: bool
    presence_true: bool
    region: str | None = None


@dataclass
class StatResult:
    point: float
    ci_low: float
    ci_high: float
    n: int
    seed: int
    iters: int
    bootstrap_sd: float
    n_invalid: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise StatError(f"length mismatch: {x.size} vs {y.size}")
    if x.size == 0:
        raise StatError("empty input")
    return x, y


def balanced_accuracy(pred: Sequence[bool], truth: Sequence[bool]) -> float:
    p, t = _pair(pred, truth)
    p, t = p.astype(bool), t.astype(bool)
    pos, neg = t.sum(), (~t).sum()
    if pos == 0 or neg == 0:
        raise StatError("balanced accuracy needs both positive and negative truth")
    sens = (p & t).sum() / pos
    spec = (~p & ~t).sum() / neg
    return float((sens + spec) / 2)


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise StatError("correlation needs at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatError("correlation undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks, ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    # boundaries of tie blocks in sorted order
    edges = np.flatnonzero(np.diff(sx)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [x.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    return pearson_r(rankdata(x), rankdata(y))


STATISTICS: dict[str, Callable[[np.ndarray], float]] = {
    "mean": lambda v: float(np.mean(v[:, 0])),
    "median": lambda v: float(np.median(v[:, 0])),
    "mae": lambda v: mae(v[:, 0], v[:, 1]),
    "pearson": lambda v: pearson_r(v[:, 0], v[:, 1]),
    "spearman": lambda v: spearman_rho(v[:, 0], v[:, 1]),
    "balanced_accuracy": lambda v: balanced_accuracy(v[:, 0], v[:, 1]),
}


def resample_indices(n: int, seed: int, i: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
    return rng.integers(0, n, size=n)


def _evaluate(fn, values, index_sets) -> list[float | None]:
    out = []
    for idx in index_sets:
        try:
            out.append(fn(values[idx]))
        except StatError:
            out.append(None)
    return out


def bootstrap_ci(
    values,
    statistic: str | Callable[[np.ndarray], float] = "mean",
    iters: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    exhaustive: bool = False,
    workers: int = 1,
) -> StatResult:
    """Percentile bootstrap over subjects.

    ``values`` is a 1D array (one scalar per subject) or a 2D array with one
    row per subject. ``statistic`` names an entry of :data:`STATISTICS` or is
    a callable on a 2D row subset. Resamples on which the statistic is
    undefined (e.g. zero variance) are skipped and counted in ``n_invalid``.

    With ``exhaustive=True`` every one of the ``n**n`` ordered resamples is
    used once instead of random draws (small ``n`` only).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    n = v.shape[0]
    if n == 0:
        raise StatError("bootstrap needs at least one subject")
    fn = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    point = fn(v)

    if exhaustive:
        if n > 8:
            raise StatError("exhaustive bootstrap limited to n <= 8")
        index_sets = [np.array(t) for t in itertools.product(range(n), repeat=n)]
        iters = len(index_sets)
        stats = _evaluate(fn, v, index_sets)
    else:
        chunks = np.array_split(np.arange(iters), max(1, workers))

        def run(chunk):
            return _evaluate(fn, v, (resample_indices(n, seed, int(i)) for i in chunk))

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        stats = [s for part in parts for s in part]

    valid = np.array([s for s in stats if s is not None])
    if valid.size == 0:
        raise StatError("statistic undefined on every resample")
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(valid, [tail, 100 - tail])
    return StatResult(
        point=float(point),
        ci_low=float(lo),
        ci_high=float(hi),
        n=n,
        seed=seed,
        iters=iters,
        bootstrap_sd=float(valid.std(ddof=1)) if valid.size > 1 else 0.0,
        n_invalid=len(stats) - int(valid.size),
    )


@dataclass
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n: int  # pairs remaining after dropping zero differences
    n_zero: int
    method: str  # "exact" or "normal"

    def to_dict(self) -> dict:
        return asdict(self)


EXACT_MAX_N = 25


def _exact_tail_probs(doubled_ranks: np.ndarray, w2: int) -> tuple[float, float]:
    """P(W <= w) and P(W >= w) under the sign-flip null, ranks doubled to integers."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    return float(counts[: w2 + 1].sum()), float(counts[w2:].sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. Ties get average ranks. For up to 25
    non-zero pairs the p-value comes from the exact permutation distribution;
    above that a normal approximation with tie and continuity corrections is
    used.
    """
    a, b = _pair(a, b)
    d = a - b
    nz = d != 0
    n = int(nz.sum())
    if n == 0:
        raise StatError("all paired differences are zero")
    d = d[nz]
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        lo, hi = _exact_tail_probs(doubled, int(round(2 * w)))
        p = min(1.0, 2 * min(lo, hi))
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48
        z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2)))
        method = "normal"
    return WilcoxonResult(w, p, n, int((~nz).sum()), method)


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}
MANIFEST_COLUMNS = ("id", "pred_count", "true_count", "presence_pred", "presence_true", "region")


def _parse_bool(text: str, fallback: bool, line: int, col: str) -> bool:
    t = text.strip().lower()
    if t == "":
        return fallback
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ManifestError(f"line {line}: {col}={text!r} is not a boolean")


def read_manifest(path: str | Path) -> list[SubjectRecord]:
    """Parse a cohort CSV. Blank presence cells default to ``count > 0``."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS[:3]) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"line 1: missing columns {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                pc = float(row["pred_count"])
                tc = float(row["true_count"])
            except (TypeError, ValueError):
                raise ManifestError(f"line {line}: counts must be numeric") from None
            if pc < 0 or tc < 0 or not (math.isfinite(pc) and math.isfinite(tc)):
                raise ManifestError(f"line {line}: counts must be finite and >= 0")
            if not (row.get("id") or "").strip():
                raise ManifestError(f"line {line}: empty id")
            region = (row.get("region") or "").strip() or None
            records.append(
                SubjectRecord(
                    id=row["id"].strip(),
                    pred_count=pc,
                    true_count=tc,
                    presence_pred=_parse_bool(row.get("presence_pred") or "", pc > 0, line, "presence_pred"),
                    presence_true=_parse_bool(row.get("presence_true") or "", tc > 0, line, "presence_true"),
                    region=region,
                )
            )
    if not records:
        raise ManifestError("manifest has no rows")
    return records
