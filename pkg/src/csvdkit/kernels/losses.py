"""Segmentation and multi-task objectives with analytic gradients.

Every loss returns ``(value, gradient)``; tensors are dense float64 arrays
of shape (C, D, H, W). Reductions go through ``np.sum`` on contiguous
arrays, which uses a fixed pairwise summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .skeleton import DEFAULT_ITERATIONS, SkeletonTape, soft_skeleton, soft_skeleton_backward

DEFAULT_EPS = 1e-5


class ShapeError(ValueError):
    pass


def as_tensor4d(x, name: str = "tensor") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 4 or min(a.shape) < 1:
        raise ShapeError(f"{name} must have shape (C, D, H, W) with all dims >= 1, got {a.shape}")
    return a


def _same(*arrays) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def _check_prob(p: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.1
    beta: float = 0.9
    epsilon: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or not self.epsilon > 0:
            raise ValueError("need alpha >= 0, beta >= 0, epsilon > 0")


def tversky_loss(p, g, valid=None, params: TverskyParams = TverskyParams()) -> tuple[float, np.ndarray]:
    p, g = as_tensor4d(p, "p"), as_tensor4d(g, "g")
    v = np.ones_like(p) if valid is None else as_tensor4d(valid, "valid")
    _same(p, g, v)
    _check_prob(p, "p")
    a, b, eps = params.alpha, params.beta, params.epsilon
    vp = v * p
    tp = np.sum(vp * g)
    fp = np.sum(vp * (1 - g))
    fn = np.sum(v * (1 - p) * g)
    num = tp + eps
    den = tp + a * fp + b * fn + eps
    loss = 1.0 - num / den
    d_num = v * g
    d_den = v * (g + a * (1 - g) - b * g)
    grad = -(d_num * den - num * d_den) / (den * den)
    return float(loss), grad


def cldice_loss(
    p, g, iterations: int = DEFAULT_ITERATIONS, epsilon: float = DEFAULT_EPS, valid=None, skel_g=None
) -> tuple[float, np.ndarray]:
    """Soft centerline Dice. With ``valid``, both inputs are masked first and the
    gradient is zero outside the mask. ``skel_g`` may carry a precomputed
    skeleton of the (masked) target."""
    p, g = as_tensor4d(p, "p"), as_tensor4d(g, "g")
    _same(p, g)
    if valid is not None:
        v = as_tensor4d(valid, "valid")
        _same(p, v)
        p, g = p * v, g * v
    tape = SkeletonTape(p.shape)
    sp = soft_skeleton(p, iterations, tape)
    sg = soft_skeleton(g, iterations) if skel_g is None else skel_g
    sum_sp, sum_sg = np.sum(sp), np.sum(sg)
    tprec = (np.sum(sp * g) + epsilon) / (sum_sp + epsilon)
    tsens = (np.sum(sg * p) + epsilon) / (sum_sg + epsilon)
    s = tprec + tsens
    loss = 1.0 - 2.0 * tprec * tsens / s
    d_prec = -2.0 * tsens * tsens / (s * s)
    d_sens = -2.0 * tprec * tprec / (s * s)
    grad = d_sens * sg / (sum_sg + epsilon)
    grad = grad + soft_skeleton_backward(d_prec * (g - tprec) / (sum_sp + epsilon), tape)
    if valid is not None:
        grad = grad * v
    return float(loss), grad


def exclusion_loss(p_epvs, p_lac) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean voxelwise product of the two class probabilities."""
    a, b = as_tensor4d(p_epvs, "p_epvs"), as_tensor4d(p_lac, "p_lac")
    _same(a, b)
    _check_prob(a, "p_epvs")
    _check_prob(b, "p_lac")
    n = a.size
    return float(np.sum(a * b) / n), b / n, a / n


@dataclass(frozen=True)
class UncertaintyState:
    s_epvs: float = 0.0
    s_lac: float = 0.0
    lambda_excl: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.s_epvs) and math.isfinite(self.s_lac)):
            raise ValueError("log-variances must be finite")
        if self.lambda_excl < 0:
            raise ValueError("lambda_excl must be >= 0")


def total_loss(l_epvs: float, l_lac: float, l_excl: float, state: UncertaintyState) -> tuple[float, dict]:
    """Homoscedastic uncertainty weighting of the two task losses plus the exclusion term.

    The gradient dict has keys ``s_epvs``, ``s_lac``, ``l_epvs``, ``l_lac``, ``l_excl``.
    """
    w_e, w_l = math.exp(-state.s_epvs), math.exp(-state.s_lac)
    value = (w_e * l_epvs + state.s_epvs) + (w_l * l_lac + state.s_lac) + state.lambda_excl * l_excl
    grads = {
        "s_epvs": 1.0 - w_e * l_epvs,
        "s_lac": 1.0 - w_l * l_lac,
        "l_epvs": w_e,
        "l_lac": w_l,
        "l_excl": state.lambda_excl,
    }
    return value, grads


DEFAULT_DS_WEIGHTS = (1.0, 0.5, 0.25)


def deep_supervision_aggregate(scale_losses: Sequence[float], weights: Sequence[float] = DEFAULT_DS_WEIGHTS) -> float:
    """Weighted mean of per-scale losses, full resolution first."""
    if len(scale_losses) != len(weights):
        raise ShapeError(f"{len(scale_losses)} losses but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return float(np.dot(w, np.asarray(scale_losses, dtype=np.float64)) / w.sum())
