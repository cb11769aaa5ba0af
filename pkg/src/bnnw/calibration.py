"""Covariate-balance calibration by concave dual maximization.

Initial weights pi_hat are calibrated so that the weighted fold average of
an instrument matches its leave-one-out pair average.  With the
entropy-like divergence D(v) = v log v - v the dual problem maximizes

    G(lam) = mean_i rho(pi_hat_i * lam'xi_i) - lam'target,   rho(v) = -exp(-v),

whose stationarity is exactly the primal balance constraint, and whose
Hessian is negative definite for linearly independent instrument columns.
Calibrated weights w_i = rho'(pi_hat_i * lam'xi_i) are strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, LinAlgError

_BACKTRACK_MIN = 2.0**-30


def rho(v):
    """Strictly concave dual kernel: rho(v) = -exp(-v)."""
    return -np.exp(-np.asarray(v, dtype=float))


def rho_prime(v):
    """rho'(v) = exp(-v) > 0; doubles as the calibration weight map."""
    return np.exp(-np.asarray(v, dtype=float))


def rho_second(v):
    """rho''(v) = -exp(-v) < 0."""
    return -np.exp(-np.asarray(v, dtype=float))


@dataclass(frozen=True)
class Divergence:
    """Divergence D with its dual kernel; only the entropy-like member ships,
    the abstraction exists so tilting alternatives can slot into the solver."""

    name: str
    d: Callable
    d_prime: Callable
    rho: Callable
    rho_prime: Callable
    rho_second: Callable


def entropy_like() -> Divergence:
    return Divergence(
        name="entropy-like",
        d=lambda v: v * np.log(v) - v,
        d_prime=np.log,
        rho=rho,
        rho_prime=rho_prime,
        rho_second=rho_second,
    )


@dataclass
class CalibrationResult:
    """Dual solution: multiplier, weights, calibrated weights, diagnostics."""

    lam: NDArray
    w: NDArray
    pi_bnn: NDArray
    balance_residual: NDArray
    iterations: int
    converged: bool
    regularized: bool = False


def dual_objective(lam: NDArray, pi_hat: NDArray, xi: NDArray, target: NDArray) -> float:
    """G(lam) = mean rho(pi_hat * xi lam) - lam'target."""
    lam = np.asarray(lam, dtype=float)
    v = np.asarray(pi_hat, dtype=float) * (np.asarray(xi, dtype=float) @ lam)
    return float(np.mean(rho(v)) - lam @ np.asarray(target, dtype=float))


def target_from_grid(grid: NDArray, u: NDArray) -> NDArray:
    """Multiplier-weighted leave-one-out pair average of an instrument grid.

    grid[j, l, :] holds xi(T_j, X_l); returns
    sum_{j != l} u_j u_l grid[j, l] / (n (n-1)).  The point-estimate path
    passes u = 1, keeping its float operations identical to a degenerate
    multiplier draw.
    """
    n = grid.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations")
    u = np.asarray(u, dtype=float)
    full = np.einsum("j,l,jld->d", u, u, grid, optimize=True)
    diag = np.einsum("j,jjd->d", u * u, grid)
    return (full - diag) / (n * (n - 1))


def compute_target(xi_fn, t: NDArray, x: NDArray) -> NDArray:
    """Exact leave-one-out pair average of xi over a fold sample.

    `xi_fn` maps (t_vector, x_matrix) -> (rows, d_xi); all n(n-1) ordered
    mismatched pairs (T_j, X_l) are evaluated.
    """
    n = t.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations")
    tj = np.repeat(t, n)
    xl = np.tile(x, (n, 1))
    vals = np.asarray(xi_fn(tj, xl), dtype=float).reshape(n, n, -1)
    return target_from_grid(vals, np.ones(n))


def solve_dual(
    pi_hat: NDArray,
    xi: NDArray,
    target: NDArray,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> CalibrationResult:
    """Damped Newton ascent of the calibration dual from lam = 0.

    Gradient g(lam) = mean_i w_i pi_hat_i xi_i - target with
    w_i = rho'(pi_hat_i lam'xi_i); Hessian is negative definite, so the
    Newton direction ascends and backtracking halves the step until G
    increases.  Converged means the max-norm of g, which equals the primal
    balance residual, is at most `tol`.  On failure the best iterate is
    returned with converged=False.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    xi = np.asarray(xi, dtype=float)
    target = np.asarray(target, dtype=float)
    n, d_xi = xi.shape
    if pi_hat.shape != (n,):
        raise ValueError("pi_hat length mismatch")
    if np.any(pi_hat < 0.0):
        raise ValueError("initial weights must be non-negative")

    lam = np.zeros(d_xi)
    regularized = False

    def parts(lam_vec):
        v = pi_hat * (xi @ lam_vec)
        with np.errstate(over="ignore"):
            w = np.exp(-v)
        obj = float(np.mean(-w) - lam_vec @ target)
        return v, w, obj

    def gradient(w_vec):
        return (xi.T @ (w_vec * pi_hat)) / n - target

    v, w, obj = parts(lam)
    best = (obj, lam.copy(), w.copy())
    iterations = 0
    converged = False
    for _ in range(max_iter):
        grad = gradient(w)
        grad_norm = np.max(np.abs(grad))
        if grad_norm <= tol:
            converged = True
            break
        scaled = xi * (w * pi_hat * pi_hat)[:, None]
        hess_neg = (xi.T @ scaled) / n  # = -Hessian, positive semidefinite
        try:
            factor = cho_factor(hess_neg)
        except LinAlgError:
            regularized = True
            try:
                factor = cho_factor(hess_neg + 1e-12 * np.eye(d_xi))
            except LinAlgError:
                break
        step = cho_solve(factor, grad)
        iterations += 1
        alpha = 1.0
        while alpha >= _BACKTRACK_MIN:
            cand = lam + alpha * step
            v_c, w_c, obj_c = parts(cand)
            accept = np.isfinite(obj_c) and obj_c > obj
            if (
                not accept
                and np.isfinite(obj_c)
                and obj_c >= obj - 8.0 * np.finfo(float).eps * max(1.0, abs(obj))
            ):
                # objective changes below float resolution near the
                # optimum; progress is measured on the gradient instead
                accept = np.max(np.abs(gradient(w_c))) < grad_norm
            if accept:
                lam, v, w, obj = cand, v_c, w_c, max(obj, obj_c)
                break
            alpha *= 0.5
        else:
            break
        if obj >= best[0]:
            best = (obj, lam.copy(), w.copy())

    if not converged:
        _, lam, w = best
    residual = (xi.T @ (w * pi_hat)) / n - target
    return CalibrationResult(
        lam=lam,
        w=w,
        pi_bnn=w * pi_hat,
        balance_residual=residual,
        iterations=iterations,
        converged=converged,
        regularized=regularized,
    )
