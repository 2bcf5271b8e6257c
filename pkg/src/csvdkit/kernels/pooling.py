"""3x3x3 max/min pooling (stride 1, same size) that records each window's winner.

Windows are scanned in a fixed offset order (dz, dy, dx each 0..2, dz
slowest) and a later candidate only replaces the current best when strictly
better, so on ties the first offset wins. Out-of-bounds cells never win.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


# above this many voxels, scan offsets one at a time instead of stacking 27 copies
STACK_LIMIT = 2**20

_OFFSETS = [(dz, dy, dx) for dz in range(3) for dy in range(3) for dx in range(3)]


@lru_cache(maxsize=32)
def _window_table(shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """(27, N) gather indices into the padded array, and the matching input flat ids."""
    pshape = shape[:-3] + tuple(n + 2 for n in shape[-3:])
    D, H, W = shape[-3:]
    padded_pos = np.arange(int(np.prod(pshape))).reshape(pshape)
    flat_ids = np.full(pshape, -1, dtype=np.int64)
    flat_ids[..., 1:-1, 1:-1, 1:-1] = np.arange(int(np.prod(shape))).reshape(shape)
    pos = np.stack([padded_pos[..., a : a + D, b : b + H, c : c + W].ravel() for a, b, c in _OFFSETS])
    ids = np.stack([flat_ids[..., a : a + D, b : b + H, c : c + W].ravel() for a, b, c in _OFFSETS])
    return pos, ids


def _pool(x: np.ndarray, better) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    fill = -np.inf if better is np.greater else np.inf
    pshape = x.shape[:-3] + tuple(n + 2 for n in x.shape[-3:])
    xp = np.full(pshape, fill)
    xp[..., 1:-1, 1:-1, 1:-1] = x
    D, H, W = x.shape[-3:]
    if x.size <= STACK_LIMIT:
        pos, ids = _window_table(x.shape)
        stack = xp.ravel()[pos]
        # argmax/argmin return the first extremum, i.e. the first offset on ties
        win = np.argmax(stack, axis=0) if better is np.greater else np.argmin(stack, axis=0)
        cols = np.arange(x.size)
        return stack[win, cols].reshape(x.shape), ids[win, cols].reshape(x.shape)
    flat_ids = np.full(pshape, -1, dtype=np.int64)
    flat_ids[..., 1:-1, 1:-1, 1:-1] = np.arange(x.size).reshape(x.shape)
    best = np.full(x.shape, fill)
    src = np.full(x.shape, -1, dtype=np.int64)
    for dz, dy, dx in _OFFSETS:
        cand = xp[..., dz : dz + D, dy : dy + H, dx : dx + W]
        upd = better(cand, best)
        best[upd] = cand[upd]
        src[upd] = flat_ids[..., dz : dz + D, dy : dy + H, dx : dx + W][upd]
    return best, src


def max_pool3(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pooled, flat index of the winning input voxel)."""
    return _pool(x, np.greater)


def min_pool3(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _pool(x, np.less)


def scatter_back(grad_out: np.ndarray, src: np.ndarray, shape) -> np.ndarray:
    """Route a pooled gradient to the winning input voxels."""
    g = np.zeros(int(np.prod(shape)))
    np.add.at(g, src.ravel(), grad_out.ravel())
    return g.reshape(shape)
