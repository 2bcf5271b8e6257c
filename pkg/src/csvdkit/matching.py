"""Instance matching and per-case detection / segmentation metrics.

Matching is one-to-one and greedy: every (pred, gt) pair that satisfies the
rule is ranked best-first and accepted when neither side is taken yet.
Extra predictions near an already matched ground-truth lesion therefore
count as false positives rather than being merged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .calibrate import Lesion
from .volume import BinaryMask, assert_same_geometry, indices_to_world

CENTROID, IOU = "centroid_distance", "iou"


@dataclass(frozen=True)
class MatchRule:
    kind: Literal["centroid_distance", "iou"]
    threshold: float

    def __post_init__(self) -> None:
        if self.kind not in (CENTROID, IOU):
            raise ValueError(f"unknown match rule {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError("match threshold must be positive")

    @classmethod
    def centroid(cls, mm: float = 5.0) -> "MatchRule":
        return cls(CENTROID, mm)

    @classmethod
    def iou(cls, fraction: float = 0.10) -> "MatchRule":
        return cls(IOU, fraction)


@dataclass
class DetectionResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    def swapped(self) -> "DetectionResult":
        return DetectionResult(
            [(g, p, s) for p, g, s in self.matches], list(self.unmatched_gt), list(self.unmatched_pred)
        )

    def to_dict(self) -> dict:
        return {
            "matches": [{"pred_id": p, "gt_id": g, "score": s} for p, g, s in self.matches],
            "unmatched_pred": self.unmatched_pred,
            "unmatched_gt": self.unmatched_gt,
        }


@dataclass
class CaseMetrics:
    precision: float
    recall: float
    f1: float
    fp_count: int
    tp_count: int
    fn_count: int
    dsc: float | None = None
    nsd: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _overlaps(pred: list[Lesion], gt: list[Lesion]) -> np.ndarray:
    """Intersection voxel counts, shape (len(pred), len(gt))."""
    inter = np.zeros((len(pred), len(gt)), dtype=np.int64)
    if not pred or not gt:
        return inter
    gt_flat = np.concatenate([g.flat_index for g in gt])
    gt_owner = np.concatenate([np.full(g.voxel_count, j) for j, g in enumerate(gt)])
    order = np.argsort(gt_flat)
    gt_flat, gt_owner = gt_flat[order], gt_owner[order]
    for i, p in enumerate(pred):
        pos = np.searchsorted(gt_flat, p.flat_index)
        pos = np.minimum(pos, len(gt_flat) - 1)
        hit = gt_flat[pos] == p.flat_index
        if hit.any():
            inter[i] = np.bincount(gt_owner[pos[hit]], minlength=len(gt))
    return inter


def candidate_scores(pred: list[Lesion], gt: list[Lesion], rule: MatchRule) -> np.ndarray:
    """Score matrix: centroid distance (mm) or IoU, for every pred/gt pair."""
    if rule.kind == CENTROID:
        if not pred or not gt:
            return np.zeros((len(pred), len(gt)))
        return cdist(np.array([p.centroid_mm for p in pred]), np.array([g.centroid_mm for g in gt]))
    inter = _overlaps(pred, gt)
    sizes_p = np.array([p.voxel_count for p in pred], dtype=np.int64)
    sizes_g = np.array([g.voxel_count for g in gt], dtype=np.int64)
    union = sizes_p[:, None] + sizes_g[None, :] - inter
    return inter / np.maximum(union, 1)


def match_instances(pred: list[Lesion], gt: list[Lesion], rule: MatchRule) -> DetectionResult:
    scores = candidate_scores(pred, gt, rule)
    if rule.kind == CENTROID:
        ok = scores <= rule.threshold
    else:
        ok = scores > rule.threshold
    cands = []
    for i, j in zip(*np.nonzero(ok)):
        s = float(scores[i, j])
        key = s if rule.kind == CENTROID else -s
        cands.append((key, pred[i].id, gt[j].id, s))
    cands.sort()
    taken_p, taken_g = set(), set()
    matches = []
    for _, pid, gid, s in cands:
        if pid in taken_p or gid in taken_g:
            continue
        taken_p.add(pid)
        taken_g.add(gid)
        matches.append((pid, gid, s))
    return DetectionResult(
        matches,
        [p.id for p in pred if p.id not in taken_p],
        [g.id for g in gt if g.id not in taken_g],
    )


def detection_metrics(result: DetectionResult) -> tuple[float, float, float, int]:
    """(precision, recall, f1, fp_count).

    A case with nothing predicted and nothing present scores 1/1/1; otherwise
    a ratio with an empty denominator is 0.
    """
    tp, fp, fn = result.tp, result.fp, result.fn
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, fp


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    assert_same_geometry(pred, gt)
    return _dice(pred.data.astype(bool), gt.data.astype(bool))


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_CROSS = ndimage.generate_binary_structure(3, 1)


def surface_voxels(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbor; out of bounds is background."""
    fg = fg.astype(bool)
    return fg & ~ndimage.binary_erosion(fg, structure=_CROSS, border_value=0)


def _nsd(a: np.ndarray, b: np.ndarray, affine: np.ndarray, tol: float, offset=(0, 0, 0)) -> float:
    sa = np.argwhere(surface_voxels(a)) + np.asarray(offset)
    sb = np.argwhere(surface_voxels(b)) + np.asarray(offset)
    if len(sa) == 0 and len(sb) == 0:
        return 1.0
    if len(sa) == 0 or len(sb) == 0:
        return 0.0
    wa, wb = indices_to_world(affine, sa), indices_to_world(affine, sb)
    da, _ = cKDTree(wb).query(wa)
    db, _ = cKDTree(wa).query(wb)
    return (int((da <= tol).sum()) + int((db <= tol).sum())) / (len(sa) + len(sb))


def nsd(pred: BinaryMask, gt: BinaryMask, tolerance: float = 1.0) -> float:
    """Normalized surface distance at ``tolerance`` mm, voxel-center distances."""
    assert_same_geometry(pred, gt)
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    return _nsd(pred.data.astype(bool), gt.data.astype(bool), pred.affine, tolerance)


def pair_scores(p: Lesion, g: Lesion, affine: np.ndarray, dims, tolerance: float) -> tuple[float, float]:
    """DSC and NSD of two isolated lesions, evaluated on their joint bounding box."""
    both = np.vstack([p.voxel_indices, g.voxel_indices])
    lo = np.maximum(both.min(axis=0) - 1, 0)
    hi = np.minimum(both.max(axis=0) + 2, np.asarray(dims))
    shape = tuple(hi - lo)
    a = np.zeros(shape, dtype=bool)
    b = np.zeros(shape, dtype=bool)
    a[tuple((p.voxel_indices - lo).T)] = True
    b[tuple((g.voxel_indices - lo).T)] = True
    return _dice(a, b), _nsd(a, b, affine, tolerance, offset=lo)


def evaluate_case(
    pred_lesions: list[Lesion],
    gt_lesions: list[Lesion],
    pred_mask: BinaryMask,
    gt_mask: BinaryMask,
    rule: MatchRule,
    nsd_tolerance: float = 1.0,
) -> tuple[DetectionResult, CaseMetrics]:
    """Detection metrics plus DSC/NSD averaged over matched pairs (``None`` if no match)."""
    assert_same_geometry(pred_mask, gt_mask)
    result = match_instances(pred_lesions, gt_lesions, rule)
    precision, recall, f1, fp = detection_metrics(result)
    metrics = CaseMetrics(precision, recall, f1, fp, result.tp, result.fn)
    if result.matches:
        by_p = {l.id: l for l in pred_lesions}
        by_g = {l.id: l for l in gt_lesions}
        scores = [
            pair_scores(by_p[pid], by_g[gid], pred_mask.affine, pred_mask.dims, nsd_tolerance)
            for pid, gid, _ in result.matches
        ]
        metrics.dsc = float(np.mean([s[0] for s in scores]))
        metrics.nsd = float(np.mean([s[1] for s in scores]))
    return result, metrics
