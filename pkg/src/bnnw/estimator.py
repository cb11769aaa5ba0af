"""Weighted M-estimation: beta = argmin sum_i w_i L(y_i, g(t_i; beta)).

Dispatch by (loss, model): squared losses with a linear index solve
weighted least squares; the quantile loss with binary arms reduces to
per-arm weighted quantiles; cross-entropy under the probit link runs
damped Newton with Fisher scoring; every other pair falls back to
Nelder-Mead restarted from five seeded points.  Weights may contain
zeros (multiplier-bootstrap draws); an observation with zero weight is
simply absent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri

from .models import (
    DoseResponseModel,
    LossKind,
    LossSpec,
    ModelKind,
    PROBIT_CLAMP,
    basis,
    g_value,
    loss_value,
    score_h,
)

logger = logging.getLogger("bnnw")

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_CE_EDGE = 1e-12


@dataclass(frozen=True)
class SolveOptions:
    """Knobs for the iterative paths; defaults suit desk-scale problems."""

    restarts: int = 5
    simplex_max_fev: int = 4000
    newton_max_iter: int = 100
    newton_tol: float = 1e-10
    seed: int = 0


def _check_weights(y, t, weights, model):
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.shape != y.shape or t.shape != y.shape:
        raise ValueError("y, t, weights must share a shape")
    if not np.all(np.isfinite(w)) or np.any(w < 0.0):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() <= 0.0:
        raise ValueError("total weight must be positive")
    if y.shape[0] < model.p:
        raise ValueError("need at least p observations")
    if model.kind is ModelKind.BINARY_ARMS:
        if w[t == 1.0].sum() <= 0.0 or w[t == 0.0].sum() <= 0.0:
            raise ValueError("an arm carries no weight")
    return y, t, w


def _wls(y, t, w, model):
    phi = basis(model, t)
    sw = np.sqrt(w)
    sol, _, rank, _ = np.linalg.lstsq(phi * sw[:, None], y * sw, rcond=None)
    if rank < model.p:
        raise ValueError("singular weighted design")
    return sol


def _weighted_quantile(values, w, tau):
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    idx = min(int(np.searchsorted(cw, tau, side="left")), values.shape[0] - 1)
    return float(values[order][idx])


def _probit_newton(y, t, w, model, opts: SolveOptions):
    phi = basis(model, t)
    p = model.p
    beta = np.zeros(p)

    def pieces(b):
        u = np.clip(phi @ b, -PROBIT_CLAMP, PROBIT_CLAMP)
        z = ndtr(u)
        nll = float(np.sum(w * (-y * np.log(z) - (1.0 - y) * np.log1p(-z))))
        return u, z, nll

    u, z, nll = pieces(beta)
    scale = max(1.0, float(w.sum()))
    for _ in range(opts.newton_max_iter):
        pdf = np.exp(-0.5 * u * u) / _SQRT_2PI
        resid = w * pdf * (z - y) / (z * (1.0 - z))
        grad = phi.T @ resid
        if np.max(np.abs(grad)) <= opts.newton_tol * scale:
            break
        fisher = w * pdf * pdf / (z * (1.0 - z))
        hess = (phi * fisher[:, None]).T @ phi + 1e-10 * np.eye(p)
        step = np.linalg.solve(hess, grad)
        alpha = 1.0
        for _ in range(30):
            cand = beta - alpha * step
            u_c, z_c, nll_c = pieces(cand)
            if np.isfinite(nll_c) and nll_c <= nll:
                beta, u, z, nll = cand, u_c, z_c, nll_c
                break
            alpha *= 0.5
        else:
            break
    return beta


def _weighted_objective(y, t, w, spec, model):
    active = w > 0.0
    ya, ta, wa = y[active], t[active], w[active]
    phi = basis(model, ta)

    def objective(b):
        z = phi @ b
        if model.kind is ModelKind.PROBIT_POLYNOMIAL:
            z = ndtr(np.clip(z, -PROBIT_CLAMP, PROBIT_CLAMP))
        if spec.kind is LossKind.CROSS_ENTROPY:
            viol = np.maximum(_CE_EDGE - z, 0.0) + np.maximum(z - (1.0 - _CE_EDGE), 0.0)
            if np.any(viol > 0.0):
                return 1e12 * (1.0 + float(np.mean(viol**2)))
            return float(np.sum(wa * (-ya * np.log(z) - (1.0 - ya) * np.log1p(-z))))
        return float(np.sum(wa * loss_value(spec, ya, z)))

    return objective


def _surrogate_start(y, t, w, model):
    """WLS solution of a squared-loss surrogate (probit: matched intercept)."""
    if model.kind is ModelKind.PROBIT_POLYNOMIAL:
        mean = float(np.clip(np.average(y, weights=w), 1e-3, 1.0 - 1e-3))
        start = np.zeros(model.p)
        start[0] = float(ndtri(mean))
        return start
    surrogate = (
        DoseResponseModel.binary_arms()
        if model.kind is ModelKind.BINARY_ARMS
        else DoseResponseModel.polynomial(model.degree)
    )
    try:
        return _wls(y, t, w, surrogate)
    except ValueError:
        return np.zeros(model.p)


def _simplex_multistart(y, t, w, spec, model, opts: SolveOptions):
    objective = _weighted_objective(y, t, w, spec, model)
    center = _surrogate_start(y, t, w, model)
    rng = np.random.default_rng(opts.seed)
    sigma = 0.5 * (1.0 + float(np.linalg.norm(center)))
    starts = [np.zeros(model.p)]
    for k in range(opts.restarts - 1):
        scale = sigma * (0.02 if k == 0 else 0.5)
        starts.append(center + scale * rng.standard_normal(model.p))
    best, best_obj = None, np.inf
    for start in starts:
        res = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={
                "xatol": 1e-8,
                "fatol": 1e-12,
                "maxfev": opts.simplex_max_fev,
                "maxiter": opts.simplex_max_fev,
            },
        )
        val = objective(res.x)
        if val < best_obj:
            best, best_obj = res.x, val
    return np.asarray(best)


def solve_beta(
    y,
    t,
    weights,
    spec: LossSpec,
    model: DoseResponseModel,
    opts: SolveOptions | None = None,
) -> NDArray:
    """Minimize the weighted loss over beta; deterministic given inputs."""
    opts = opts or SolveOptions()
    y, t, w = _check_weights(y, t, weights, model)
    linear = model.kind in (ModelKind.BINARY_ARMS, ModelKind.POLYNOMIAL)
    if spec.kind is LossKind.SQUARED and linear:
        beta = _wls(y, t, w, model)
    elif spec.kind is LossKind.QUANTILE and model.kind is ModelKind.BINARY_ARMS:
        beta = np.array(
            [
                _weighted_quantile(y[t == 0.0], w[t == 0.0], spec.tau),
                _weighted_quantile(y[t == 1.0], w[t == 1.0], spec.tau),
            ]
        )
    elif (
        spec.kind is LossKind.CROSS_ENTROPY
        and model.kind is ModelKind.PROBIT_POLYNOMIAL
    ):
        beta = _probit_newton(y, t, w, model, opts)
    else:
        beta = _simplex_multistart(y, t, w, spec, model, opts)
    if np.linalg.norm(beta) > 1e3:
        logger.warning("solve_beta: |beta| = %.3g exceeds 1e3", np.linalg.norm(beta))
    return beta


def near_zero_check(y, t, weights, spec, model, beta) -> float:
    """Audit value |mean_i w_i h(y_i, t_i; beta)| for the fitted score."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    w = np.asarray(weights, dtype=float)
    h = score_h(spec, model, y, t, np.asarray(beta, dtype=float))
    return float(np.linalg.norm((w[:, None] * h).mean(axis=0)))


def bic_score(y, t, weights, spec, model, beta_hat) -> float:
    """p log(N_eff) + 2 sum_i w_i L(y_i, g(t_i; beta)); lower is better."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    w = np.asarray(weights, dtype=float)
    n_eff = float(w.sum())
    total = float(np.sum(w * loss_value(spec, y, g_value(model, t, beta_hat))))
    return model.p * math.log(n_eff) + 2.0 * total
