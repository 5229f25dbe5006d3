"""Dense numerical kernels: BFGS maximization, finite differences,
fixed-point iteration, and SPD factorization helpers.

Everything here is a pure function of its inputs, so the routines are safe
to call from any number of concurrent chains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class NumericsError(Exception):
    pass


class NotSPDError(NumericsError):
    """Matrix is not symmetric positive definite (after any repair)."""


class FixedPointError(NumericsError):
    def __init__(self, message, residual, last):
        super().__init__(message)
        self.residual = residual
        self.last = last


def default_fd_step(x: np.ndarray) -> float:
    """Finite-difference step scaled to the magnitude of x."""
    return 1e-5 * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def finite_diff_gradient(field: Callable[[np.ndarray], float], x: np.ndarray,
                         h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of a scalar field at x."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = default_fd_step(x)
    if h <= 0:
        raise ValueError("h must be positive")
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp = field(x + e)
        fm = field(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite field evaluation along axis {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_hessian(field: Callable[[np.ndarray], float], x: np.ndarray,
                        h: Optional[float] = None) -> np.ndarray:
    """Symmetrized matrix of second central differences of a scalar field."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = default_fd_step(x)
    if h <= 0:
        raise ValueError("h must be positive")
    d = x.size
    f0 = field(x)
    if not np.isfinite(f0):
        raise NumericsError("non-finite field evaluation at expansion point")
    hess = np.empty((d, d))
    steps = h * np.eye(d)
    for i in range(d):
        fp = field(x + steps[i])
        fm = field(x - steps[i])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite field evaluation along axis {i}")
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h * h)
        for j in range(i + 1, d):
            fpp = field(x + steps[i] + steps[j])
            fpm = field(x + steps[i] - steps[j])
            fmp = field(x - steps[i] + steps[j])
            fmm = field(x - steps[i] - steps[j])
            if not all(np.isfinite(v) for v in (fpp, fpm, fmp, fmm)):
                raise NumericsError(f"non-finite field evaluation along axes {i},{j}")
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h * h)
    return 0.5 * (hess + hess.T)


def fixed_point_solve(map_fn: Callable[[np.ndarray], np.ndarray], start: np.ndarray,
                      tol: float = 1e-8, max_iter: int = 100) -> tuple[np.ndarray, int]:
    """Plain (undamped) fixed-point iteration z <- map(z).

    Returns (z, iterations) where ||map(z) - z|| <= tol holds for the
    returned z.  Raises FixedPointError after max_iter; callers in the
    samplers treat that as a rejected proposal.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = np.asarray(start, dtype=float)
    residual = np.inf
    for it in range(max_iter + 1):
        m = np.asarray(map_fn(z), dtype=float)
        diff = m - z
        res_sq = float(diff @ diff)
        if not np.isfinite(res_sq):
            raise FixedPointError("non-finite fixed-point iterate", np.inf, z)
        residual = np.sqrt(res_sq)
        if residual <= tol:
            return z, it
        z = m
    raise FixedPointError(
        f"fixed point not reached in {max_iter} iterations (residual {residual:.3e})",
        residual, z)


def cholesky_spd(m: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m. Raises NotSPDError otherwise."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    scale = np.max(np.abs(m), initial=0.0)
    if not np.allclose(m, m.T, atol=1e-10 * max(scale, 1.0)):
        raise NotSPDError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        raise NotSPDError("matrix is not positive definite") from None


def regularize_spd(m: np.ndarray) -> np.ndarray:
    """Repair a nearly-SPD matrix by escalating diagonal jitter.

    Jitter starts at 1e-10 * trace/D and grows tenfold up to
    1e-4 * trace/D; beyond that the matrix is considered unusable.
    """
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    d = m.shape[0]
    try:
        cholesky_spd(m)
        return m
    except NotSPDError:
        pass
    base = np.trace(m) / d
    if not np.isfinite(base) or base <= 0:
        raise NotSPDError("matrix has non-positive trace; cannot regularize")
    jitter = 1e-10 * base
    while jitter <= 1e-4 * base:
        repaired = m + jitter * np.eye(d)
        try:
            cholesky_spd(repaired)
            return repaired
        except NotSPDError:
            jitter *= 10.0
    raise NotSPDError("matrix not SPD after maximal jitter")


@dataclass
class BfgsResult:
    maximizer: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    gradient_norm: float
    message: str = ""


def bfgs_maximize(objective: Callable[[np.ndarray], float], start: np.ndarray,
                  gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  tol: float = 1e-6, max_iter: int = 200,
                  armijo_c1: float = 1e-4, shrink: float = 0.5) -> BfgsResult:
    """Quasi-Newton maximization with Armijo backtracking line search.

    The iterate sequence is monotone in the objective, so the result never
    has a lower objective value than the start point.  Non-finite trial
    evaluations make the line search backtrack; if no finite ascent step
    exists the search stops with converged=False.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.array(start, dtype=float, copy=True)
    if gradient is None:
        grad = lambda p: finite_diff_gradient(objective, p)
    else:
        grad = gradient

    fx = float(objective(x))
    if not np.isfinite(fx):
        raise ValueError("objective is not finite at the start point")
    g = np.asarray(grad(x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient is not finite at the start point")

    d = x.size
    hinv = np.eye(d)
    first_update = True
    message = ""
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > tol and it < max_iter:
        direction = hinv @ g
        slope = float(g @ direction)
        if slope <= 0:
            # curvature model went bad; restart from steepest ascent
            hinv = np.eye(d)
            first_update = True
            direction = g.copy()
            slope = float(g @ g)
            if slope == 0.0:
                break
        # Armijo backtracking; finite failed trials refine alpha by a
        # safeguarded quadratic fit (exact on quadratic objectives), while
        # non-finite trials fall back to plain shrinking
        alpha = 1.0
        if first_update:
            dn = float(np.linalg.norm(direction))
            if dn > 1e3:
                alpha = 1e3 / dn
        accepted = False
        while alpha * float(np.linalg.norm(direction)) > 1e-20:
            trial = x + alpha * direction
            ft = float(objective(trial))
            if np.isfinite(ft) and ft >= fx + armijo_c1 * alpha * slope:
                accepted = True
                break
            if np.isfinite(ft):
                denom = 2.0 * (fx + slope * alpha - ft)
                if denom > 0:
                    fitted = slope * alpha * alpha / denom
                    alpha = min(max(fitted, 0.1 * alpha), 0.9 * alpha)
                    continue
            alpha *= shrink
        if not accepted:
            message = "line search found no finite ascent step"
            break
        gt = np.asarray(grad(trial), dtype=float)
        if not np.all(np.isfinite(gt)):
            message = "gradient became non-finite; stopped at last finite iterate"
            break
        s = trial - x
        y = gt - g
        x, fx, g = trial, ft, gt
        it += 1
        gnorm = float(np.linalg.norm(g))
        sy = float(s @ y)
        # maximization curvature condition is s.y < 0
        if sy < -1e-12 * (np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            if first_update:
                hinv = (-sy / float(y @ y)) * np.eye(d)
                first_update = False
            rho = 1.0 / sy
            v = np.eye(d) - rho * np.outer(s, y)
            hinv = v @ hinv @ v.T - rho * np.outer(s, s)
        # skip the update otherwise; the next slope check recovers

    converged = gnorm <= tol
    if not converged and not message:
        message = f"iteration budget exhausted (gradient norm {gnorm:.3e})"
    return BfgsResult(maximizer=x, objective_value=fx, iterations=it,
                      converged=converged, gradient_norm=gnorm, message=message)
