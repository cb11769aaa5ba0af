"""Nuisance regressions and the calibration instrument.

mu(t, x; beta) = E[h(Y, T; beta) | T=t, X=x] is fit componentwise by
boosted regression trees on the features (t, x).  Its beta-derivative is
either the exact diagonal map available for the binary average-effect
model or a central finite difference of refitted regressions.  The
instrument stacks mu over vec(dmu) and drops numerically dependent
columns by a pivoted rank-revealing factorization on an evaluation
sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import qr

from .models import DoseResponseModel, LossSpec, ModelKind, LossKind, score_h
from .trees import BoostedTreesConfig, GradientBoostedTrees

_PRUNE_TOL = 1e-8


class DmuMode(Enum):
    ANALYTIC_BINARY_ATE = "analytic-binary-ate"
    NUMERIC_BETA = "numeric-beta"


def _features(t: NDArray, x: NDArray) -> NDArray:
    return np.column_stack([np.asarray(t, dtype=float), np.asarray(x, dtype=float)])


class MuPredictor:
    """Componentwise boosted-tree estimate of the conditional score mean."""

    def __init__(self, models: list[GradientBoostedTrees], beta_init: NDArray):
        self.models = models
        self.beta_init = beta_init

    @property
    def p(self) -> int:
        return len(self.models)

    def predict(self, t: NDArray, x: NDArray) -> NDArray:
        f = _features(t, x)
        return np.column_stack([m.predict(f) for m in self.models])

    def pair_grids(self, t_vals: NDArray, x_rows: NDArray) -> NDArray:
        """Exact values on the product grid {(t_j, x_l)}, shape (nt, nx, p)."""
        return np.stack(
            [m.product_grid(t_vals, x_rows) for m in self.models], axis=-1
        )


def fit_mu(
    y: NDArray,
    t: NDArray,
    x: NDArray,
    beta_init: NDArray,
    spec: LossSpec,
    model: DoseResponseModel,
    cfg: BoostedTreesConfig,
) -> MuPredictor:
    """Regress each component of h(Y, T; beta_init) on (T, X).

    beta_init stays frozen; the fit is never re-evaluated at any later
    parameter value.
    """
    beta_init = np.asarray(beta_init, dtype=float)
    if y.size == 0:
        raise ValueError("empty training set")
    targets = score_h(spec, model, y, t, beta_init)
    if not np.all(np.isfinite(targets)):
        raise ValueError("non-finite score targets")
    f = _features(t, x)
    models = [
        GradientBoostedTrees(cfg).fit(f, targets[:, j]) for j in range(model.p)
    ]
    return MuPredictor(models, beta_init)


class AnalyticBinaryDmu:
    """Exact dmu/dbeta = diag(1-t, t) for squared loss with binary arms."""

    p = 2

    def predict(self, t: NDArray, x: NDArray) -> NDArray:
        t = np.asarray(t, dtype=float)
        out = np.zeros((t.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 - t
        out[:, 1, 1] = t
        return out

    def pair_grids(self, t_vals: NDArray, x_rows: NDArray) -> NDArray:
        t_vals = np.asarray(t_vals, dtype=float)
        nt, nx = t_vals.shape[0], np.asarray(x_rows).shape[0]
        out = np.zeros((nt, nx, 2, 2))
        out[:, :, 0, 0] = (1.0 - t_vals)[:, None]
        out[:, :, 1, 1] = t_vals[:, None]
        return out


class NumericDmu:
    """Central finite differences of refitted mu at beta +- delta e_j."""

    def __init__(self, plus: list[MuPredictor], minus: list[MuPredictor], delta: float):
        self.plus = plus
        self.minus = minus
        self.delta = delta
        self.p = len(plus)

    def predict(self, t: NDArray, x: NDArray) -> NDArray:
        cols = [
            (pj.predict(t, x) - mj.predict(t, x)) / (2.0 * self.delta)
            for pj, mj in zip(self.plus, self.minus)
        ]
        return np.stack(cols, axis=-1)  # (rows, p, p): [:, a, j] = d mu_a / d beta_j

    def pair_grids(self, t_vals: NDArray, x_rows: NDArray) -> NDArray:
        cols = [
            (pj.pair_grids(t_vals, x_rows) - mj.pair_grids(t_vals, x_rows))
            / (2.0 * self.delta)
            for pj, mj in zip(self.plus, self.minus)
        ]
        return np.stack(cols, axis=-1)


def fit_dmu(
    y: NDArray,
    t: NDArray,
    x: NDArray,
    beta_init: NDArray,
    spec: LossSpec,
    model: DoseResponseModel,
    cfg: BoostedTreesConfig,
    mode: DmuMode,
):
    """Estimate dmu/dbeta at the frozen beta_init.

    The analytic mode is exact but only valid for (squared, binary-arms);
    the numeric mode refits mu at beta_init +- delta e_j per coordinate
    (2p refits, shared tree config) with delta = max(1e-2, 1e-2 |beta|).
    """
    beta_init = np.asarray(beta_init, dtype=float)
    if mode is DmuMode.ANALYTIC_BINARY_ATE:
        if not (
            spec.kind is LossKind.SQUARED and model.kind is ModelKind.BINARY_ARMS
        ):
            raise ValueError(
                "analytic dmu mode is only valid for squared loss with binary arms"
            )
        return AnalyticBinaryDmu()
    delta = max(1e-2, 1e-2 * float(np.linalg.norm(beta_init)))
    plus, minus = [], []
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = delta
        plus.append(fit_mu(y, t, x, beta_init + e, spec, model, cfg))
        minus.append(fit_mu(y, t, x, beta_init - e, spec, model, cfg))
    return NumericDmu(plus, minus, delta)


@dataclass
class InstrumentFn:
    """Stacked instrument (mu, vec(dmu)) with dependent columns removed."""

    mu: MuPredictor
    dmu: object
    mask: NDArray  # retained-column mask over the p + p^2 candidates
    labels: list

    @property
    def d_xi(self) -> int:
        return int(self.mask.sum())

    def _stack(self, mu_vals: NDArray, dmu_vals: NDArray) -> NDArray:
        flat = dmu_vals.reshape(*dmu_vals.shape[:-2], -1)
        return np.concatenate([mu_vals, flat], axis=-1)[..., self.mask]

    def evaluate(self, t: NDArray, x: NDArray) -> NDArray:
        """Instrument rows xi(t_i, x_i), shape (rows, d_xi)."""
        return self._stack(self.mu.predict(t, x), self.dmu.predict(t, x))

    def pair_grids(self, t_vals: NDArray, x_rows: NDArray) -> NDArray:
        """xi on the product grid {(t_j, x_l)}, shape (nt, nx, d_xi)."""
        return self._stack(
            self.mu.pair_grids(t_vals, x_rows), self.dmu.pair_grids(t_vals, x_rows)
        )


def build_instrument(
    mu: MuPredictor,
    dmu,
    t_eval: NDArray,
    x_eval: NDArray,
    tol: float = _PRUNE_TOL,
) -> InstrumentFn:
    """Stack mu over vec(dmu) and prune dependent columns.

    The candidate columns are evaluated on (t_eval, x_eval) and a pivoted
    QR keeps the leading pivots whose |R_kk| exceeds tol relative to the
    largest; everything else is dropped.
    """
    p = mu.p
    if t_eval.shape[0] < p + p * p:
        raise ValueError("evaluation sample smaller than the candidate stack")
    mu_vals = mu.predict(t_eval, x_eval)
    dmu_vals = dmu.predict(t_eval, x_eval).reshape(t_eval.shape[0], -1)
    cand = np.concatenate([mu_vals, dmu_vals], axis=1)
    _, r, piv = qr(cand, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] <= 0.0:
        raise ValueError("all instrument columns are numerically zero")
    rank = int(np.sum(diag > tol * diag[0]))
    mask = np.zeros(cand.shape[1], dtype=bool)
    mask[piv[:rank]] = True
    labels = [f"mu[{a}]" for a in range(p)] + [
        f"dmu[{a}][{b}]" for a in range(p) for b in range(p)
    ]
    return InstrumentFn(mu=mu, dmu=dmu, mask=mask, labels=labels)
