"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

GRAD_EPS = 1e-5


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = GRAD_EPS, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (optionally only at ``coords`` flat indices)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, scale_floor: float = 1e-4) -> float:
    """``max |a - n| / max(|a|, |n|, tau)`` over all coordinates.

    ``tau = max(floor, scale_floor * max|n|)``: components several orders of
    magnitude below the largest one sit at the finite-difference round-off
    level, so they are compared on that absolute scale instead.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    tau = max(floor, scale_floor * float(np.max(np.abs(n))))
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), tau)
    return float(np.max(np.abs(a - n) / den))


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, eps: float = GRAD_EPS, coords=None) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` must return ``(value, grad)`` and be pure. ``coords`` restricts
    the comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    numeric = numeric_grad(lambda z: float(fn(z.copy())[0]), x, eps, coords)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = numeric.reshape(-1)
    if coords is not None:
        idx = np.asarray(list(coords), dtype=np.int64)
        analytic, numeric = analytic[idx], numeric[idx]
    return relative_error(analytic, numeric)
