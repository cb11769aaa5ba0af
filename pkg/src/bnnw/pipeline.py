"""Cross-fitted estimation and weighted-bootstrap inference.

One run works fold by fold: train the stabilized-weight net on the
complement, fit the initial estimate and the nuisance regressions on the
complement's two halves, calibrate the fold weights against the
leave-one-out instrument average, and solve the weighted M-step on the
fold; the K fold solutions are averaged.  Bootstrap replicates reuse
every fitted artifact: only the multiplier-weighted dual and the fold
M-steps are re-solved, so no net or tree is ever refit.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .calibration import CalibrationResult, solve_dual, target_from_grid
from .data import Dataset, FoldPlan, make_folds
from .estimator import solve_beta
from .models import DoseResponseModel, LossKind, LossSpec, ModelKind
from .nuisance import DmuMode, build_instrument, fit_dmu, fit_mu
from .trees import BoostedTreesConfig
from .weightnet import WeightNetConfig, net_to_json, train_weight_net

logger = logging.getLogger("bnnw")

MULTIPLIER_LAWS = ("bernoulli2", "exponential", "ones")


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent, reproducible generator for (seed, tags...); string tags
    hash through crc32 so the fan-out is stable across runs and platforms."""
    ints = [int(seed)]
    for tag in tags:
        ints.append(zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag))
    return np.random.default_rng(np.random.SeedSequence(ints))


def _derive_seed(seed: int, *tags) -> int:
    return int(substream(seed, *tags).integers(0, 2**63 - 1))


@dataclass(frozen=True)
class RunConfig:
    """Everything a cross-fitted run needs; seeded, no clock defaults."""

    spec: LossSpec
    model: DoseResponseModel
    seed: int
    k_folds: int = 5
    net: WeightNetConfig = field(default_factory=WeightNetConfig)
    trees: BoostedTreesConfig = field(default_factory=BoostedTreesConfig)
    calib_tol: float = 1e-9
    calib_max_iter: int = 100
    bootstrap_b: int = 599
    multiplier: str = "bernoulli2"
    alpha: float = 0.05
    dmu_mode: DmuMode | None = None
    beta_init_zero: bool | None = None
    pi_oracle: Callable | None = None
    functionals: tuple = ()

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.bootstrap_b < 0:
            raise ValueError("bootstrap_b must be >= 0")
        if self.multiplier not in MULTIPLIER_LAWS:
            raise ValueError(f"multiplier must be one of {MULTIPLIER_LAWS}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def is_binary_ate(self) -> bool:
        return (
            self.spec.kind is LossKind.SQUARED
            and self.model.kind is ModelKind.BINARY_ARMS
        )

    def resolved_dmu_mode(self) -> DmuMode:
        if self.dmu_mode is not None:
            return self.dmu_mode
        return (
            DmuMode.ANALYTIC_BINARY_ATE if self.is_binary_ate else DmuMode.NUMERIC_BETA
        )

    def resolved_beta_init_zero(self) -> bool:
        if self.beta_init_zero is not None:
            return self.beta_init_zero
        return self.is_binary_ate

    def resolved_functionals(self) -> list[tuple[str, NDArray]]:
        if self.functionals:
            return [(name, np.asarray(v, dtype=float)) for name, v in self.functionals]
        if self.model.kind is ModelKind.BINARY_ARMS:
            name = {
                LossKind.SQUARED: "ate",
                LossKind.QUANTILE: "qte",
            }.get(self.spec.kind, "effect")
            return [(name, np.array([-1.0, 1.0]))]
        return []


@dataclass
class FoldArtifacts:
    """Fitted per-fold state reused verbatim by every bootstrap replicate."""

    k: int
    idx: NDArray
    y: NDArray
    t: NDArray
    pi_hat: NDArray
    xi: NDArray
    grids: NDArray  # (n, n, d_xi): instrument at (T_j, X_l)
    beta_init: NDArray
    calibration: CalibrationResult
    fallback: bool
    beta: NDArray
    instrument_labels: list
    net_json: str | None = None


@dataclass
class EstimateReport:
    """Cross-fitted estimate with per-fold diagnostics and provenance."""

    beta: NDArray
    fold_betas: NDArray
    functionals: dict
    diagnostics: list
    seed: int
    k_folds: int
    wall_clock_s: float = 0.0
    fold_artifacts: list = field(default_factory=list, repr=False)

    @property
    def any_fallback(self) -> bool:
        return any(d["fallback"] for d in self.diagnostics)

    def to_dict(self) -> dict:
        """JSON-ready view; wall clock stays out so reruns are identical."""
        return {
            "beta": [float(v) for v in self.beta],
            "fold_betas": [[float(v) for v in row] for row in self.fold_betas],
            "functionals": {k: float(v) for k, v in self.functionals.items()},
            "diagnostics": self.diagnostics,
            "seed": int(self.seed),
            "k_folds": int(self.k_folds),
        }


def _draw_multipliers(law: str, n: int, rng: np.random.Generator) -> NDArray:
    if law == "bernoulli2":
        return 2.0 * rng.integers(0, 2, n).astype(float)
    if law == "exponential":
        return rng.exponential(1.0, n)
    return np.ones(n)


def run_bnnw(data: Dataset, cfg: RunConfig) -> EstimateReport:
    """Cross-fitted balanced estimation (the point-estimate pass).

    Per fold: (a) stabilized weights trained on the complement (or taken
    from `pi_oracle`); (b) initial fit on the complement's first half and
    nuisance fits on the second half at that frozen value; (c) dual
    calibration of the fold weights against the exact leave-one-out
    instrument average; (d) weighted M-step on the fold.  A fold whose
    dual does not converge falls back to uncalibrated weights and is
    flagged.  Returns the fold average with artifacts attached.
    """
    p = cfg.model.p
    if data.n < 2 * cfg.k_folds * max(p, 10):
        raise ValueError("sample too small for the requested fold plan")
    started = time.perf_counter()
    plan: FoldPlan = make_folds(data.n, cfg.k_folds, _derive_seed(cfg.seed, "folds"))
    dmu_mode = cfg.resolved_dmu_mode()
    beta_init_zero = cfg.resolved_beta_init_zero()

    artifacts = []
    diagnostics = []
    fold_betas = np.empty((cfg.k_folds, p))
    for k in range(cfg.k_folds):
        idx = plan.folds[k]
        comp = plan.complements[k]
        h1, h2 = plan.nested_halves[k]
        net_json = None
        if cfg.pi_oracle is not None:
            pi_fn = cfg.pi_oracle
        else:
            net_cfg = replace(cfg.net, seed=_derive_seed(cfg.seed, "net", k))
            net = train_weight_net(data.subset(comp), net_cfg)
            pi_fn = net.predict
            net_json = net_to_json(net)
        pi_k = np.asarray(pi_fn(data.t[idx], data.x[idx]), dtype=float)

        if beta_init_zero:
            beta_init = np.zeros(p)
        else:
            w1 = np.asarray(pi_fn(data.t[h1], data.x[h1]), dtype=float)
            beta_init = solve_beta(data.y[h1], data.t[h1], w1, cfg.spec, cfg.model)

        mu = fit_mu(
            data.y[h2], data.t[h2], data.x[h2], beta_init, cfg.spec, cfg.model, cfg.trees
        )
        dmu = fit_dmu(
            data.y[h2],
            data.t[h2],
            data.x[h2],
            beta_init,
            cfg.spec,
            cfg.model,
            cfg.trees,
            dmu_mode,
        )
        instrument = build_instrument(mu, dmu, data.t[idx], data.x[idx])
        grids = instrument.pair_grids(data.t[idx], data.x[idx])
        n_k = idx.shape[0]
        diag = np.arange(n_k)
        xi = np.ascontiguousarray(grids[diag, diag, :])
        target = target_from_grid(grids, np.ones(n_k))
        cal = solve_dual(pi_k, xi, target, cfg.calib_tol, cfg.calib_max_iter)
        fallback = not cal.converged
        if fallback:
            logger.warning(
                "fold %d calibration did not converge; using uncalibrated weights", k
            )
        weights_k = pi_k if fallback else cal.pi_bnn
        beta_k = solve_beta(data.y[idx], data.t[idx], weights_k, cfg.spec, cfg.model)
        fold_betas[k] = beta_k
        artifacts.append(
            FoldArtifacts(
                k=k,
                idx=idx,
                y=data.y[idx],
                t=data.t[idx],
                pi_hat=pi_k,
                xi=xi,
                grids=grids,
                beta_init=beta_init,
                calibration=cal,
                fallback=fallback,
                beta=beta_k,
                instrument_labels=[
                    lab for lab, keep in zip(instrument.labels, instrument.mask) if keep
                ],
                net_json=net_json,
            )
        )
        diagnostics.append(
            {
                "fold": k,
                "n": int(n_k),
                "d_xi": int(xi.shape[1]),
                "lambda": [float(v) for v in cal.lam],
                "balance_residual_inf": float(np.max(np.abs(cal.balance_residual))),
                "iterations": int(cal.iterations),
                "converged": bool(cal.converged),
                "fallback": bool(fallback),
                "beta_init": [float(v) for v in beta_init],
                "beta": [float(v) for v in beta_k],
            }
        )

    beta = fold_betas.mean(axis=0)
    functionals = {
        name: float(nu @ beta) for name, nu in cfg.resolved_functionals()
    }
    return EstimateReport(
        beta=beta,
        fold_betas=fold_betas,
        functionals=functionals,
        diagnostics=diagnostics,
        seed=cfg.seed,
        k_folds=cfg.k_folds,
        wall_clock_s=time.perf_counter() - started,
        fold_artifacts=artifacts,
    )


def equitailed_interval(draws: NDArray, alpha: float) -> tuple[float, float]:
    """Empirical equitailed interval: the ceil(B a/2) and ceil(B (1-a/2))
    order statistics of the draws (1-based)."""
    draws = np.sort(np.asarray(draws, dtype=float))
    b = draws.shape[0]
    lo = min(max(int(np.ceil(b * alpha / 2.0)), 1), b)
    hi = min(max(int(np.ceil(b * (1.0 - alpha / 2.0))), 1), b)
    return float(draws[lo - 1]), float(draws[hi - 1])


@dataclass
class BootstrapResult:
    """Multiplier-bootstrap draws and the intervals they imply."""

    draws: NDArray  # (B, p)
    valid: NDArray  # (B,) replicate usable
    alpha: float
    intervals: dict  # name -> (lo, hi)
    n_excluded: int

    def to_dict(self) -> dict:
        return {
            "alpha": float(self.alpha),
            "n_draws": int(self.draws.shape[0]),
            "n_excluded": int(self.n_excluded),
            "intervals": {
                k: [float(lo), float(hi)] for k, (lo, hi) in self.intervals.items()
            },
        }


def _bootstrap_replicate(cfg: RunConfig, artifacts: Sequence[FoldArtifacts], b: int):
    """One multiplier draw: U-weighted duals and fold M-steps, nuisances reused."""
    total_n = sum(a.idx.shape[0] for a in artifacts)
    rng = substream(cfg.seed, "bootstrap", b)
    u_all = _draw_multipliers(cfg.multiplier, total_n, rng)
    p = cfg.model.p
    betas = np.empty((len(artifacts), p))
    for a in artifacts:
        u = u_all[a.idx]
        scaled = u * a.pi_hat
        target = target_from_grid(a.grids, u)
        cal = solve_dual(scaled, a.xi, target, cfg.calib_tol, cfg.calib_max_iter)
        if not cal.converged:
            return None
        try:
            betas[a.k] = solve_beta(a.y, a.t, cal.w * scaled, cfg.spec, cfg.model)
        except ValueError:
            return None
    return betas.mean(axis=0)


def run_bootstrap(
    data: Dataset, cfg: RunConfig, fitted: EstimateReport
) -> BootstrapResult:
    """Weighted bootstrap over `cfg.bootstrap_b` multiplier draws.

    Replicate b draws one multiplier vector over the full sample from the
    (seed, "bootstrap", b) substream, so the set of draws does not depend
    on execution order.  Replicates whose dual fails or whose M-step loses
    an arm are excluded from the quantiles and counted.
    """
    artifacts = fitted.fold_artifacts
    if not artifacts:
        raise ValueError("fitted report carries no fold artifacts")
    b_total = cfg.bootstrap_b
    p = cfg.model.p
    draws = np.full((b_total, p), np.nan)
    valid = np.zeros(b_total, dtype=bool)
    for b in range(b_total):
        out = _bootstrap_replicate(cfg, artifacts, b)
        if out is not None:
            draws[b] = out
            valid[b] = True
    n_excluded = int(b_total - valid.sum())
    if n_excluded:
        logger.warning("bootstrap: %d of %d replicates excluded", n_excluded, b_total)
    good = draws[valid]
    intervals = {}
    if good.shape[0]:
        for j in range(p):
            intervals[f"beta[{j}]"] = equitailed_interval(good[:, j], cfg.alpha)
        for name, nu in cfg.resolved_functionals():
            intervals[name] = equitailed_interval(good @ nu, cfg.alpha)
    return BootstrapResult(
        draws=draws,
        valid=valid,
        alpha=cfg.alpha,
        intervals=intervals,
        n_excluded=n_excluded,
    )
