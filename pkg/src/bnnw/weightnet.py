"""Stabilized-weight estimation by a ReLU network with positive output.

The network maps (t, x) through standardized inputs, `depth` ReLU layers
of width `width`, and a final scalar layer whose output z is transformed
to exp(clip(z, -log M, log M)), so predictions always lie in [1/M, M].
Training minimizes the pair-based empirical risk

    R(pi) = mean_i pi(T_i, X_i)^2 - 2 * mean_{j != l} pi(T_j, X_l)

by Adam over minibatches, where the cross term runs over all ordered
within-batch pairs.  The returned parameters are the epoch checkpoint
(including the initial state) with the lowest exact validation risk on a
held-out fifth of the rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .data import Dataset

_EVAL_CHUNK = 1 << 17
# validation sets larger than this are subsampled before the exact
# quadratic-risk evaluation
_EXACT_RISK_LIMIT = 2000


class TrainingDivergenceError(RuntimeError):
    """Validation risk became non-finite during training."""


@dataclass(frozen=True)
class WeightNetConfig:
    width: int = 64
    depth: int = 3
    clip: float = 20.0
    epochs: int = 200
    batch: int = 64
    step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.clip <= 1.0:
            raise ValueError("clip must be > 1")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.epochs < 1 or self.step <= 0:
            raise ValueError("epochs must be >= 1 and step > 0")


@dataclass
class WeightNet:
    """Feedforward ReLU net with exp-clip output and input standardization."""

    weights: list  # W_l of shape (out, in); inputs are (t, x) rows
    biases: list
    clip: float
    input_shift: NDArray
    input_scale: NDArray
    validation_history: list = field(default_factory=list, repr=False)

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    def _inputs(self, t, x) -> NDArray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
            t = np.atleast_1d(t)
        if x.shape[1] != self.input_shift.shape[0] - 1:
            raise ValueError("covariate dimension mismatch")
        z = np.column_stack([t, x])
        return (z - self.input_shift) / self.input_scale

    def predict(self, t, x) -> NDArray:
        """Stabilized-weight predictions, always within [1/clip, clip]."""
        return _eval_std(self, self._inputs(t, x))


def predict_pi(net: WeightNet, t: float, x: NDArray) -> float:
    """Single-point prediction; value lies in [1/M, M]."""
    return float(net.predict(np.atleast_1d(float(t)), np.asarray(x, dtype=float)[None, :])[0])


def init_weight_net(d: int, cfg: WeightNetConfig) -> WeightNet:
    """He-initialized hidden layers; the final layer starts at zero so the
    untrained net predicts exp(0) = 1 everywhere."""
    rng = np.random.default_rng(cfg.seed)
    sizes = [d + 1] + [cfg.width] * cfg.depth + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if fan_out == 1:
            weights.append(np.zeros((1, fan_in)))
        else:
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return WeightNet(
        weights=weights,
        biases=biases,
        clip=cfg.clip,
        input_shift=np.zeros(d + 1),
        input_scale=np.ones(d + 1),
    )


def _eval_std(net: WeightNet, z: NDArray) -> NDArray:
    """Forward pass on standardized inputs, values only."""
    a = z
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.maximum(a @ w.T + b, 0.0)
    u = (a @ net.weights[-1].T + net.biases[-1]).ravel()
    log_m = math.log(net.clip)
    return np.exp(np.clip(u, -log_m, log_m))


def _forward(net: WeightNet, z: NDArray):
    """Forward pass on standardized inputs; returns (pi, du_mask, activations)."""
    acts = [z]
    a = z
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.maximum(a @ w.T + b, 0.0)
        acts.append(a)
    u = (a @ net.weights[-1].T + net.biases[-1]).ravel()
    log_m = math.log(net.clip)
    inside = (u > -log_m) & (u < log_m)
    pi = np.exp(np.clip(u, -log_m, log_m))
    return pi, inside, acts


def _backward(net: WeightNet, acts, dpi_du: NDArray):
    """Backpropagate per-row output gradients dR/du; returns grads per layer."""
    grads = []
    delta = dpi_du[:, None]
    for l in range(len(net.weights) - 1, -1, -1):
        gw = delta.T @ acts[l]
        gb = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * (acts[l] > 0.0)
        grads.append((gw, gb))
    grads.reverse()
    return grads


_PAIR_IDX: dict[int, tuple[NDArray, NDArray]] = {}


def _pair_indices(b: int) -> tuple[NDArray, NDArray]:
    """Index pairs (j, l), j != l, ordered; cached per batch size."""
    hit = _PAIR_IDX.get(b)
    if hit is None:
        jj = np.repeat(np.arange(b), b)
        ll = np.tile(np.arange(b), b)
        keep = jj != ll
        hit = (jj[keep], ll[keep])
        if len(_PAIR_IDX) < 64:
            _PAIR_IDX[b] = hit
    return hit


def _pair_rows(t: NDArray, x: NDArray):
    """All ordered pairs (t_j, x_l), j != l."""
    jj, ll = _pair_indices(t.shape[0])
    return t[jj], x[ll]


def minibatch_risk(net: WeightNet, t: NDArray, x: NDArray) -> float:
    """Pair-exact risk of the minibatch (used by the gradient check)."""
    b = t.shape[0]
    if b < 2:
        raise ValueError("minibatch must have at least 2 rows")
    diag = net.predict(t, x)
    tp, xp = _pair_rows(t, x)
    cross = net.predict(tp, xp)
    return float(np.mean(diag**2) - 2.0 * np.sum(cross) / (b * (b - 1)))


def _batch_inputs(z_std: NDArray, rows: NDArray) -> NDArray:
    """Diagonal rows plus all ordered mismatched pairs, pre-standardized."""
    b = rows.shape[0]
    jj, ll = _pair_indices(b)
    sub = z_std[rows]
    z = np.empty((b + jj.shape[0], z_std.shape[1]))
    z[:b] = sub
    z[b:, 0] = sub[jj, 0]
    z[b:, 1:] = sub[ll, 1:]
    return z


def _risk_gradient_std(net: WeightNet, z: NDArray, b: int):
    """Risk and gradient from pre-assembled standardized rows."""
    pi, inside, acts = _forward(net, z)
    diag, cross = pi[:b], pi[b:]
    risk = float(np.mean(diag**2) - 2.0 * np.sum(cross) / (b * (b - 1)))
    drisk_dpi = np.concatenate(
        [2.0 * diag / b, np.full(cross.shape[0], -2.0 / (b * (b - 1)))]
    )
    return risk, _backward(net, acts, drisk_dpi * pi * inside)


def risk_gradient(net: WeightNet, t: NDArray, x: NDArray):
    """Minibatch risk and its parameter gradient.

    The squared term uses the batch diagonal; the cross term runs over all
    ordered within-batch pairs (t_j, x_l), j != l, each passing through the
    net at the mismatched input.
    """
    b = t.shape[0]
    if b < 2:
        raise ValueError("minibatch must have at least 2 rows")
    z_std = net._inputs(t, x)
    return _risk_gradient_std(net, _batch_inputs(z_std, np.arange(b)), b)


def _risk_of(predict, t: NDArray, x: NDArray) -> float:
    """Exact pair risk of a vectorized map (t, x) -> pi over all n(n-1) pairs."""
    n = t.shape[0]
    diag = np.asarray(predict(t, x), dtype=float)
    cross_sum = 0.0
    per_chunk = max(1, _EVAL_CHUNK // n)
    for start in range(0, n, per_chunk):
        js = np.arange(start, min(start + per_chunk, n))
        tj = np.repeat(t[js], n)
        xl = np.tile(x, (js.shape[0], 1))
        cross_sum += float(np.sum(predict(tj, xl)))
    cross_sum -= float(np.sum(diag))
    return float(np.mean(diag**2) - 2.0 * cross_sum / (n * (n - 1)))


def _risk_std(net: WeightNet, z_std: NDArray) -> float:
    """Exact pair risk from pre-standardized rows (column 0 is t)."""
    n = z_std.shape[0]
    diag = _eval_std(net, z_std)
    cross_sum = 0.0
    per_chunk = max(1, _EVAL_CHUNK // n)
    block = np.empty((per_chunk * n, z_std.shape[1]))
    for start in range(0, n, per_chunk):
        m = min(start + per_chunk, n) - start
        z = block[: m * n]
        z[:, 0] = np.repeat(z_std[start : start + m, 0], n)
        z[:, 1:] = np.tile(z_std[:, 1:], (m, 1))
        cross_sum += float(np.sum(_eval_std(net, z)))
    cross_sum -= float(np.sum(diag))
    return float(np.mean(diag**2) - 2.0 * cross_sum / (n * (n - 1)))


def empirical_risk(net_or_fn, data: Dataset) -> float:
    """Exact empirical risk over all ordered pairs of `data` (quadratic cost).

    Accepts a WeightNet or any map (t_vector, x_matrix) -> pi_vector.
    """
    if data.n < 2:
        raise ValueError("empirical risk needs at least 2 observations")
    predict = net_or_fn.predict if isinstance(net_or_fn, WeightNet) else net_or_fn
    return _risk_of(predict, data.t, data.x)


def train_weight_net(data: Dataset, cfg: WeightNetConfig) -> WeightNet:
    """Fit the stabilized-weight net on `data` by minibatch Adam.

    A seeded shuffle holds out the last fifth of rows; their exact pair
    risk is recorded each epoch (subsampled above 2000 rows) and the best
    recorded checkpoint, the initial state included, is returned with the
    history attached.
    """
    n = data.n
    if n < 2 * cfg.batch:
        raise ValueError(f"need n >= 2*batch, got n={n}, batch={cfg.batch}")
    rng = np.random.default_rng(cfg.seed)
    net = init_weight_net(data.d, cfg)
    cols = np.column_stack([data.t, data.x])
    shift = cols.mean(axis=0)
    scale = cols.std(axis=0)
    scale[scale == 0.0] = 1.0
    net.input_shift = shift
    net.input_scale = scale

    perm = rng.permutation(n)
    n_val = max(2, n // 5)
    train_idx, val_idx = perm[:-n_val], perm[-n_val:]
    if val_idx.shape[0] > _EXACT_RISK_LIMIT:
        val_idx = val_idx[
            np.sort(rng.permutation(val_idx.shape[0])[:_EXACT_RISK_LIMIT])
        ]
    z_std = (cols - shift) / scale
    z_tr = np.ascontiguousarray(z_std[train_idx])
    z_val = np.ascontiguousarray(z_std[val_idx])

    m_state = [
        (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)
    ]
    v_state = [
        (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)
    ]
    steps = 0

    def snapshot():
        return [w.copy() for w in net.weights], [b.copy() for b in net.biases]

    best_risk = _risk_std(net, z_val)
    best_params = snapshot()
    net.validation_history = [best_risk]

    n_tr = z_tr.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, cfg.batch):
            rows = order[start : start + cfg.batch]
            if rows.shape[0] < 2:
                continue
            _, grads = _risk_gradient_std(
                net, _batch_inputs(z_tr, rows), rows.shape[0]
            )
            steps += 1
            c1 = 1.0 - cfg.beta1**steps
            c2 = 1.0 - cfg.beta2**steps
            for l, (gw, gb) in enumerate(grads):
                mw, mb = m_state[l]
                vw, vb = v_state[l]
                mw += (1.0 - cfg.beta1) * (gw - mw)
                mb += (1.0 - cfg.beta1) * (gb - mb)
                vw += (1.0 - cfg.beta2) * (gw * gw - vw)
                vb += (1.0 - cfg.beta2) * (gb * gb - vb)
                net.weights[l] -= cfg.step * (mw / c1) / (np.sqrt(vw / c2) + cfg.eps)
                net.biases[l] -= cfg.step * (mb / c1) / (np.sqrt(vb / c2) + cfg.eps)
        val_risk = _risk_std(net, z_val)
        net.validation_history.append(val_risk)
        if not np.isfinite(val_risk):
            raise TrainingDivergenceError(
                f"validation risk diverged at epoch {len(net.validation_history) - 1}"
            )
        if val_risk < best_risk:
            best_risk = val_risk
            best_params = snapshot()

    net.weights, net.biases = best_params
    return net


def net_to_json(net: WeightNet) -> str:
    """Flat JSON document: layer sizes plus row-major weight arrays."""
    doc = {
        "layer_sizes": [net.weights[0].shape[1]]
        + [w.shape[0] for w in net.weights],
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "clip": net.clip,
        "input_shift": net.input_shift.tolist(),
        "input_scale": net.input_scale.tolist(),
    }
    return json.dumps(doc, sort_keys=True)


def net_from_json(text: str) -> WeightNet:
    doc = json.loads(text)
    sizes = doc["layer_sizes"]
    weights = [
        np.asarray(w, dtype=float).reshape(out, inp)
        for w, inp, out in zip(doc["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    return WeightNet(
        weights=weights,
        biases=biases,
        clip=float(doc["clip"]),
        input_shift=np.asarray(doc["input_shift"], dtype=float),
        input_scale=np.asarray(doc["input_scale"], dtype=float),
    )
