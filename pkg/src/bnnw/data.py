"""Data containers: observations, datasets, fold plans, and CSV ingestion.

Datasets and fold plans are immutable after construction and safe to share
across concurrent workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray


class TreatmentKind(Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class MissingColumnError(ValueError):
    """A column named in the schema is absent from the CSV header."""


class CellParseError(ValueError):
    """A CSV cell is empty or not a finite decimal number."""


@dataclass(frozen=True)
class Observation:
    """One (outcome, treatment, covariates) record."""

    y: float
    t: float
    x: NDArray


@dataclass(frozen=True)
class CsvSchema:
    """Column-role map for CSV ingestion; roles are never inferred."""

    outcome: str
    treatment: str
    covariates: Sequence[str]


@dataclass(frozen=True)
class Dataset:
    """Immutable sample of N observations with d covariates each.

    Stored column-wise as arrays for vectorized work; `observations`
    iterates row-wise views when record access is more natural.
    """

    y: NDArray
    t: NDArray
    x: NDArray
    treatment_kind: TreatmentKind

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.t, dtype=float))
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array of shape (N, d)")
        if y.shape != (x.shape[0],) or t.shape != (x.shape[0],):
            raise ValueError("y, t, x row counts disagree")
        if y.size == 0:
            raise ValueError("dataset has zero rows")
        for name, arr in (("y", y), ("t", t), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in {name}")
        if self.treatment_kind is TreatmentKind.BINARY and not np.all(
            (t == 0.0) | (t == 1.0)
        ):
            raise ValueError("binary treatment_kind but treatment not in {0,1}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(float(self.y[i]), float(self.t[i]), self.x[i])

    def subset(self, idx: NDArray) -> "Dataset":
        """Row subset (copy), preserving order of `idx`."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.y[idx], self.t[idx], self.x[idx], self.treatment_kind)


@dataclass(frozen=True)
class FoldPlan:
    """K disjoint folds covering {0..N-1}, plus per-fold complement splits.

    `folds[k]` is the held-out fold I_k; `complements[k]` the remaining
    indices; `nested_halves[k]` splits the complement into two near-equal
    parts used to separate the initial fit from the nuisance fit.
    Deterministic given (n, k, seed).
    """

    n: int
    k: int
    seed: int
    folds: tuple = field(repr=False)
    complements: tuple = field(repr=False)
    nested_halves: tuple = field(repr=False)


def make_folds(n: int, k: int, seed: int) -> FoldPlan:
    """Cut a uniformly shuffled permutation of {0..n-1} into K blocks.

    Block sizes differ by at most one; the remainder when K does not
    divide n goes one-per-fold to the first n mod K folds.  Each
    complement is split into two halves along the same permutation order,
    sizes differing by at most one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2 * k:
        raise ValueError(f"need n >= 2*k, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, rem = divmod(n, k)
    sizes = [base + (1 if i < rem else 0) for i in range(k)]
    stops = np.cumsum([0] + sizes)
    blocks = [perm[stops[i] : stops[i + 1]] for i in range(k)]
    folds, complements, halves = [], [], []
    for i in range(k):
        comp = np.concatenate([blocks[j] for j in range(k) if j != i])
        h = comp.size // 2
        folds.append(np.sort(blocks[i]))
        complements.append(np.sort(comp))
        halves.append((np.sort(comp[:h]), np.sort(comp[h:])))
    return FoldPlan(
        n=n,
        k=k,
        seed=seed,
        folds=tuple(folds),
        complements=tuple(complements),
        nested_halves=tuple(halves),
    )


def load_csv(
    path: str | Path,
    schema: CsvSchema,
    treatment_kind: TreatmentKind = TreatmentKind.CONTINUOUS,
) -> Dataset:
    """Load a header-first CSV into a Dataset using explicit column roles.

    Rows keep file order.  Missing columns, empty files, and
    non-numeric/missing cells are errors; so is a non-{0,1} treatment
    value when `treatment_kind` is binary.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        wanted = [schema.outcome, schema.treatment, *schema.covariates]
        col_idx = {}
        for name in wanted:
            if name not in header:
                raise MissingColumnError(f"{path}: column {name!r} not in header")
            col_idx[name] = header.index(name)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: zero data rows")

    def parse(cell: str, rownum: int, col: str) -> float:
        try:
            v = float(cell)
        except ValueError:
            raise CellParseError(
                f"{path}: row {rownum} column {col!r}: unparseable cell {cell!r}"
            ) from None
        if not np.isfinite(v):
            raise CellParseError(f"{path}: row {rownum} column {col!r}: non-finite")
        return v

    y = np.empty(len(rows))
    t = np.empty(len(rows))
    x = np.empty((len(rows), len(schema.covariates)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise CellParseError(f"{path}: row {i + 2} has {len(row)} cells")
        y[i] = parse(row[col_idx[schema.outcome]], i + 2, schema.outcome)
        t[i] = parse(row[col_idx[schema.treatment]], i + 2, schema.treatment)
        for j, c in enumerate(schema.covariates):
            x[i, j] = parse(row[col_idx[c]], i + 2, c)
    return Dataset(y, t, x, treatment_kind)


def save_csv(data: Dataset, path: str | Path, covariate_names: Sequence[str] | None = None) -> None:
    """Write `data` as a y,t,x1..xd CSV with round-trippable float formatting."""
    path = Path(path)
    names = covariate_names or [f"x{j + 1}" for j in range(data.d)]
    if len(names) != data.d:
        raise ValueError("covariate_names length mismatch")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "t", *names])
        for i in range(data.n):
            writer.writerow(
                [repr(float(data.y[i])), repr(float(data.t[i]))]
                + [repr(float(v)) for v in data.x[i]]
            )
