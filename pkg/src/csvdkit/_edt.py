"""Exact squared Euclidean distance transform (separable lower envelope).

One 1D pass per axis over every line of the array; each pass computes
``out[q] = min_p f[p] + (s * (q - p))**2`` where ``s`` is the axis spacing.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _envelope_lines(f, out, spacing):
    n_lines, n = f.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    s2 = spacing * spacing
    for line in range(n_lines):
        row = f[line]
        k = -1
        for q in range(n):
            fq = row[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while k >= 0:
                p = v[k]
                s = ((fq + s2 * q * q) - (row[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s if k > 0 else -np.inf
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[line, q] = np.inf
            continue
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            out[line, q] = s2 * d * d + row[v[j]]


def _pass(f: np.ndarray, axis: int, spacing: float, workers: int) -> np.ndarray:
    moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
    lines = moved.reshape(-1, moved.shape[-1])
    out = np.empty_like(lines)
    if workers <= 1 or lines.shape[0] < 2 * workers:
        _envelope_lines(lines, out, spacing)
    else:
        bounds = np.linspace(0, lines.shape[0], workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(
                pool.map(
                    lambda ab: _envelope_lines(lines[ab[0] : ab[1]], out[ab[0] : ab[1]], spacing),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


def squared_edt(sites: np.ndarray, spacing, workers: int = 1) -> np.ndarray:
    """Squared distance (in spacing units) from each voxel to the nearest ``True`` site.

    Voxels are infinitely far when there are no sites at all.
    """
    f = np.where(sites, 0.0, np.inf)
    for axis in range(f.ndim):
        f = _pass(f, axis, float(spacing[axis]), workers)
    return f
