"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class FDReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int  # coordinates skipped as non-differentiable (kinks / pooling ties)
    worst_index: tuple | None = None


def fd_report(
    fn: GradFn,
    point: np.ndarray,
    step: float = 1e-6,
    coords: np.ndarray | None = None,
    kink_tol: float | None = None,
    floor: float = 1e-12,
) -> FDReport:
    """Compare ``fn``'s analytic gradient with central differences.

    ``coords`` restricts the check to those flat indices. With ``kink_tol``
    a coordinate is excluded when its forward and backward one-sided
    differences disagree by more than ``kink_tol`` (relative), which flags
    max/min ties and relu kinks inside ``[x - step, x + step]``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    f0, grad = fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(f0) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite value or gradient at the base point")
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst, worst_i, excluded = 0.0, None, 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp, _ = fn(x)
        flat[i] = orig - step
        fm, _ = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {int(i)}")
        numeric = (fp - fm) / (2 * step)
        if kink_tol is not None:
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
                excluded += 1
                continue
        analytic = grad.reshape(-1)[i]
        err = abs(analytic - numeric) / max(floor, abs(numeric))
        if err > worst:
            worst, worst_i = err, np.unravel_index(int(i), x.shape)
    return FDReport(float(worst), len(idx) - excluded, excluded, worst_i)


def finite_difference_check(fn: GradFn, point: np.ndarray, step: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1e-12, |numeric|)``."""
    return fd_report(fn, point, step).max_rel_error
