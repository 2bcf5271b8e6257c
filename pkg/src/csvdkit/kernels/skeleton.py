"""Soft skeleton (iterated soft erosion / opening) with exact reverse mode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pooling import max_pool3, min_pool3, scatter_back

DEFAULT_ITERATIONS = 5


@dataclass
class SkeletonTape:
    shape: tuple
    erode_src: list = field(default_factory=list)  # x_k = erode(x_{k-1}), k >= 1
    open_erode_src: list = field(default_factory=list)
    open_dilate_src: list = field(default_factory=list)
    relu_mask: list = field(default_factory=list)  # x_k - open(x_k) > 0
    delta: list = field(default_factory=list)
    skel_before: list = field(default_factory=list)
    update_mask: list = field(default_factory=list)


def _open(x):
    e, se = min_pool3(x)
    o, so = max_pool3(e)
    return o, se, so


def soft_skeleton(p: np.ndarray, iterations: int = DEFAULT_ITERATIONS, tape: SkeletonTape | None = None) -> np.ndarray:
    """Soft skeleton of a (C, D, H, W) probability tensor; pooling is per channel.

    ``skel = relu(x - open(x))`` at k = 0, then for each further erosion
    ``skel += relu(delta - skel * delta)`` which keeps the output in [0, 1].
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    x = np.asarray(p, dtype=np.float64)
    if tape is not None:
        tape.shape = x.shape
    skel = None
    for k in range(iterations + 1):
        if k > 0:
            x, src = min_pool3(x)
            if tape is not None:
                tape.erode_src.append(src)
        o, se, so = _open(x)
        diff = x - o
        m = diff > 0
        delta = np.where(m, diff, 0.0)
        if skel is None:
            new = delta
            u = None
        else:
            u = delta - skel * delta
            new = skel + np.where(u > 0, u, 0.0)
        if tape is not None:
            tape.open_erode_src.append(se)
            tape.open_dilate_src.append(so)
            tape.relu_mask.append(m)
            tape.delta.append(delta)
            tape.skel_before.append(skel)
            tape.update_mask.append(None if u is None else u > 0)
        skel = new
    return skel


def soft_skeleton_backward(grad_skel: np.ndarray, tape: SkeletonTape) -> np.ndarray:
    """Gradient wrt the skeleton input given dL/dskel and a forward tape."""
    shape = tape.shape
    K = len(tape.delta) - 1
    g_skel = np.asarray(grad_skel, dtype=np.float64)
    g_delta = [None] * (K + 1)
    for k in range(K, 0, -1):
        n = tape.update_mask[k]
        prev = tape.skel_before[k]
        g_delta[k] = np.where(n, g_skel * (1.0 - prev), 0.0)
        g_skel = g_skel - np.where(n, g_skel * tape.delta[k], 0.0)
    g_delta[0] = g_skel

    g_x = np.zeros(shape)
    for k in range(K, -1, -1):
        gd = np.where(tape.relu_mask[k], g_delta[k], 0.0)
        g_x = g_x + gd
        g_e = scatter_back(-gd, tape.open_dilate_src[k], shape)
        g_x = g_x + scatter_back(g_e, tape.open_erode_src[k], shape)
        if k > 0:
            g_x = scatter_back(g_x, tape.erode_src[k - 1], shape)
    return g_x
