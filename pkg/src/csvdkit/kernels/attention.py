"""Gated cross-task attention: EPVS context gates an additive update of lacune features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .losses import ShapeError, as_tensor4d


@dataclass
class AttentionWeights:
    """1x1x1 projections. ``wq``/``wk`` map C -> C/r, ``wv`` maps C -> C."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    r: int = 4

    def __post_init__(self) -> None:
        self.wq = np.asarray(self.wq, dtype=np.float64)
        self.wk = np.asarray(self.wk, dtype=np.float64)
        self.wv = np.asarray(self.wv, dtype=np.float64)
        c = self.wv.shape[0]
        if self.r < 1 or c % self.r:
            raise ShapeError(f"channels {c} not divisible by r={self.r}")
        ci = c // self.r
        if self.wv.shape != (c, c) or self.wq.shape != (ci, c) or self.wk.shape != (ci, c):
            raise ShapeError(
                f"expected wq,wk {(ci, c)} and wv {(c, c)}, got {self.wq.shape}, {self.wk.shape}, {self.wv.shape}"
            )

    @property
    def channels(self) -> int:
        return self.wv.shape[0]

    @property
    def c_int(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, channels: int, r: int = 4, rng: np.random.Generator | None = None) -> "AttentionWeights":
        """Random query/key projections and a zero value projection."""
        rng = np.random.default_rng() if rng is None else rng
        ci = channels // r
        scale = 1.0 / math.sqrt(channels)
        return cls(
            rng.normal(0, scale, (ci, channels)),
            rng.normal(0, scale, (ci, channels)),
            np.zeros((channels, channels)),
            r,
        )


def _project(w: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.tensordot(w, f, axes=(1, 0))


def gated_attention_forward(f_lac, f_epvs, w: AttentionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Returns (refined lacune features, spatial gate of shape (D, H, W))."""
    f_lac, f_epvs = as_tensor4d(f_lac, "f_lac"), as_tensor4d(f_epvs, "f_epvs")
    if f_lac.shape != f_epvs.shape:
        raise ShapeError(f"feature shapes differ: {f_lac.shape} vs {f_epvs.shape}")
    if f_lac.shape[0] != w.channels:
        raise ShapeError(f"features have {f_lac.shape[0]} channels, weights expect {w.channels}")
    q = _project(w.wq, f_lac)
    k = _project(w.wk, f_epvs)
    v = _project(w.wv, f_epvs)
    gate = expit(np.sum(q * k, axis=0) / math.sqrt(w.c_int))
    return f_lac + gate[None] * v, gate


def gated_attention_backward(grad_out, f_lac, f_epvs, w: AttentionWeights) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * f_hat)`` wrt inputs and projection weights."""
    g = as_tensor4d(grad_out, "grad_out")
    f_lac, f_epvs = as_tensor4d(f_lac, "f_lac"), as_tensor4d(f_epvs, "f_epvs")
    q = _project(w.wq, f_lac)
    k = _project(w.wk, f_epvs)
    v = _project(w.wv, f_epvs)
    root = math.sqrt(w.c_int)
    gate = expit(np.sum(q * k, axis=0) / root)

    d_v = gate[None] * g
    d_gate = np.sum(g * v, axis=0)
    d_z = d_gate * gate * (1 - gate) / root
    d_q = d_z[None] * k
    d_k = d_z[None] * q
    return {
        "f_lac": g + _project(w.wq.T, d_q),
        "f_epvs": _project(w.wk.T, d_k) + _project(w.wv.T, d_v),
        "wq": np.tensordot(d_q, f_lac, axes=([1, 2, 3], [1, 2, 3])),
        "wk": np.tensordot(d_k, f_epvs, axes=([1, 2, 3], [1, 2, 3])),
        "wv": np.tensordot(d_v, f_epvs, axes=([1, 2, 3], [1, 2, 3])),
    }
