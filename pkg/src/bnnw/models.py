"""Treatment-model pairs: loss functions, dose-response curves, and scores.

All operations are pure, vectorized over numpy arrays, and broadcast
scalars; they are safe for unrestricted concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.special import ndtr

# Linear probit indices are clamped here before the normal CDF so the
# cross-entropy loss stays finite in double precision.
PROBIT_CLAMP = 8.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class LossKind(Enum):
    SQUARED = "squared"
    QUANTILE = "quantile"
    ASYMMETRIC_LS = "asymmetric-ls"
    CROSS_ENTROPY = "cross-entropy"


class ModelKind(Enum):
    BINARY_ARMS = "binary-arms"
    POLYNOMIAL = "polynomial"
    PROBIT_POLYNOMIAL = "probit-polynomial"


@dataclass(frozen=True)
class LossSpec:
    """Loss L(y, z); `tau` is the asymmetry level for the quantile-type kinds."""

    kind: LossKind
    tau: float | None = None

    def __post_init__(self):
        needs_tau = self.kind in (LossKind.QUANTILE, LossKind.ASYMMETRIC_LS)
        if needs_tau:
            if self.tau is None or not (0.0 < self.tau < 1.0):
                raise ValueError("tau must lie strictly in (0, 1)")
        elif self.tau is not None:
            raise ValueError(f"{self.kind.value} takes no tau")

    @staticmethod
    def squared() -> "LossSpec":
        return LossSpec(LossKind.SQUARED)

    @staticmethod
    def quantile(tau: float) -> "LossSpec":
        return LossSpec(LossKind.QUANTILE, tau)

    @staticmethod
    def asymmetric_ls(tau: float) -> "LossSpec":
        return LossSpec(LossKind.ASYMMETRIC_LS, tau)

    @staticmethod
    def cross_entropy() -> "LossSpec":
        return LossSpec(LossKind.CROSS_ENTROPY)


@dataclass(frozen=True)
class DoseResponseModel:
    """Parametric dose-response curve g(t; beta) with p parameters."""

    kind: ModelKind
    degree: int = 0

    def __post_init__(self):
        if self.kind is ModelKind.BINARY_ARMS:
            if self.degree != 0:
                raise ValueError("binary-arms takes no degree")
        elif self.degree < 0:
            raise ValueError("degree must be non-negative")

    @property
    def p(self) -> int:
        return 2 if self.kind is ModelKind.BINARY_ARMS else self.degree + 1

    @staticmethod
    def binary_arms() -> "DoseResponseModel":
        return DoseResponseModel(ModelKind.BINARY_ARMS)

    @staticmethod
    def polynomial(degree: int) -> "DoseResponseModel":
        return DoseResponseModel(ModelKind.POLYNOMIAL, degree)

    @staticmethod
    def probit_polynomial(degree: int) -> "DoseResponseModel":
        return DoseResponseModel(ModelKind.PROBIT_POLYNOMIAL, degree)


def _norm_pdf(u: NDArray) -> NDArray:
    return np.exp(-0.5 * u * u) / _SQRT_2PI


def _powers(t: NDArray, degree: int) -> NDArray:
    """Vandermonde rows (1, t, ..., t^degree), shape (..., degree+1)."""
    t = np.asarray(t, dtype=float)
    return np.power(t[..., None], np.arange(degree + 1))


def basis(model: DoseResponseModel, t) -> NDArray:
    """Per-observation regressor rows: the gradient of the linear index.

    (1-t, t) for binary arms, (1, t, ..., t^q) for the polynomial kinds.
    """
    t = np.asarray(t, dtype=float)
    if model.kind is ModelKind.BINARY_ARMS:
        return np.stack([1.0 - t, t], axis=-1)
    return _powers(t, model.degree)


def g_value(model: DoseResponseModel, t, beta) -> NDArray:
    """Evaluate g(t; beta); broadcasts over t."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.p,):
        raise ValueError(f"beta must have length {model.p}, got {beta.shape}")
    idx = basis(model, t) @ beta
    if model.kind is ModelKind.PROBIT_POLYNOMIAL:
        return ndtr(np.clip(idx, -PROBIT_CLAMP, PROBIT_CLAMP))
    return idx


def g_grad(model: DoseResponseModel, t, beta) -> NDArray:
    """Gradient of g with respect to beta, shape (..., p)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.p,):
        raise ValueError(f"beta must have length {model.p}, got {beta.shape}")
    b = basis(model, t)
    if model.kind is ModelKind.PROBIT_POLYNOMIAL:
        idx = np.clip(b @ beta, -PROBIT_CLAMP, PROBIT_CLAMP)
        return _norm_pdf(idx)[..., None] * b
    return b


def _check_cross_entropy_domain(y: NDArray, z: NDArray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("cross-entropy requires outcomes in {0,1}")
    if not np.all((z > 0.0) & (z < 1.0)):
        raise ValueError("cross-entropy requires model values strictly in (0,1)")


def loss_value(spec: LossSpec, y, z) -> NDArray:
    """L(y, z), elementwise.

    squared: (y-z)^2/2; quantile: (y-z)(tau - 1(y-z<=0));
    asymmetric-ls: (y-z)^2 |tau - 1(y-z<=0)|;
    cross-entropy: -y log z - (1-y) log(1-z).
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    r = y - z
    if spec.kind is LossKind.SQUARED:
        return 0.5 * r * r
    if spec.kind is LossKind.QUANTILE:
        return r * (spec.tau - (r <= 0.0))
    if spec.kind is LossKind.ASYMMETRIC_LS:
        return r * r * np.abs(spec.tau - (r <= 0.0))
    _check_cross_entropy_domain(y, z)
    return -y * np.log(z) - (1.0 - y) * np.log1p(-z)


def loss_deriv(spec: LossSpec, y, z) -> NDArray:
    """dL/dz almost everywhere; at the kink y=z the indicator 1(y-z<=0) is 1."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    r = y - z
    if spec.kind is LossKind.SQUARED:
        return -r
    if spec.kind is LossKind.QUANTILE:
        return (r <= 0.0) - spec.tau
    if spec.kind is LossKind.ASYMMETRIC_LS:
        return -2.0 * r * np.abs(spec.tau - (r <= 0.0))
    _check_cross_entropy_domain(y, z)
    return -y / z + (1.0 - y) / (1.0 - z)


def score_h(spec: LossSpec, model: DoseResponseModel, y, t, beta) -> NDArray:
    """Score h(y, t; beta) = L'(y, g(t; beta)) * dg/dbeta, shape (..., p)."""
    z = g_value(model, t, beta)
    return loss_deriv(spec, np.asarray(y, dtype=float), z)[..., None] * g_grad(
        model, t, beta
    )
