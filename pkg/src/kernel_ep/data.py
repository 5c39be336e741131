"""Datasets: synthetic logistic and compound-gamma problems, CSV ingestion, splits."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import (
    EmptyDataset,
    ImproperParameters,
    IoFailure,
    NonNumericFeature,
    ParseError,
    SingleClassDataset,
)

MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ImproperParameters("X must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.X)):
            raise ImproperParameters("dataset contains non-finite features")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ImproperParameters("labels must be 0 or 1")

    def __len__(self):
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, suffix="") -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.name + suffix, list(self.provenance))


def synthetic_logistic(w: np.ndarray, n: int, rng: np.random.Generator, name="synthetic") -> Dataset:
    """x ~ N(0, I), y ~ Bernoulli(sigmoid(w . x))."""
    w = np.asarray(w, dtype=float)
    X = rng.standard_normal((n, w.size))
    y = (rng.random(n) < expit(X @ w)).astype(int)
    return Dataset(X, y, name, ["synthetic: w ~ N(0, I), x ~ N(0, I)"])


def compound_gamma_problem(s1: float, r1: float, s2: float, n: int,
                           rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Draw r2 ~ Gamma(s1, r1), tau ~ Gamma(s2, r2), then x_i ~ N(0, 1/tau)."""
    r2 = rng.gamma(s1, 1.0 / r1)
    tau = rng.gamma(s2, 1.0 / r2)
    return rng.standard_normal(n) / math.sqrt(tau), tau


def classification_error(w_mean: np.ndarray, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean((ds.X @ w_mean > 0).astype(int) != ds.y))


def _parse_cell(text: str, row: int, col: int, header: str) -> float:
    token = text.strip()
    if token.lower() in MISSING_TOKENS:
        raise ParseError(f"missing value {token!r} at row {row}, column {col} ({header})")
    try:
        value = float(token)
    except ValueError:
        raise NonNumericFeature(f"non-numeric value {token!r} at row {row}, column {col} ({header})") from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r} at row {row}, column {col} ({header})")
    return value


def load_csv_dataset(path, label_column=-1, header: Optional[bool] = None,
                     standardize: bool = True, name: Optional[str] = None) -> Dataset:
    """Read a comma-separated file of numeric features and a binary label.

    ``label_column`` is an index or a header name.  The header row is
    detected automatically unless ``header`` is given.  Labels with two
    distinct values are mapped to 0/1 in sorted order.  Features are
    standardised per column.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise EmptyDataset(f"{path} is empty")
    if header is None:
        header = _looks_like_header(rows[0])
    names = [c.strip() for c in rows[0]] if header else [f"col{j}" for j in range(len(rows[0]))]
    body = rows[1:] if header else rows
    if not body:
        raise EmptyDataset(f"{path} has no data rows")
    width = len(names)
    if isinstance(label_column, str):
        try:
            label_column = names.index(label_column)
        except ValueError:
            raise ParseError(f"no column named {label_column!r}") from None
    label_column = label_column % width
    first = 2 if header else 1
    values = np.empty((len(body), width))
    for i, r in enumerate(body):
        if len(r) != width:
            raise ParseError(f"row {i + first} has {len(r)} fields, expected {width}")
        for j, cell in enumerate(r):
            values[i, j] = _parse_cell(cell, i + first, j, names[j])
    raw_y = values[:, label_column]
    classes = np.unique(raw_y)
    if classes.size > 2:
        raise ParseError(f"label column {names[label_column]} has {classes.size} distinct values")
    y = (raw_y == classes[-1]).astype(int) if classes.size == 2 else np.zeros(len(raw_y), dtype=int)
    X = np.delete(values, label_column, axis=1)
    provenance = [f"source: {path}", f"label column: {names[label_column]}"]
    if standardize:
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
        provenance.append("features standardized to zero mean, unit variance")
    return Dataset(X, y, name or str(path), provenance)


def _looks_like_header(row) -> bool:
    for cell in row:
        try:
            float(cell)
        except ValueError:
            if cell.strip().lower() not in MISSING_TOKENS:
                return True
    return False


def stratified_subsample(ds: Dataset, n_train: int, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Split off ``n_train`` rows keeping class proportions (largest remainder)."""
    n = len(ds)
    if not 0 < n_train <= n:
        raise ImproperParameters(f"n_train must be in [1, {n}], got {n_train}")
    counts = np.array([np.sum(ds.y == 0), np.sum(ds.y == 1)])
    if np.any(counts == 0):
        raise SingleClassDataset(f"{ds.name} has a single class")
    quota = counts * n_train / n
    take = np.floor(quota).astype(int)
    short = n_train - take.sum()
    for k in np.argsort(-(quota - take), kind="stable")[:short]:
        take[k] += 1
    train_idx = []
    for label, k in enumerate(take):
        idx = np.flatnonzero(ds.y == label)
        train_idx.append(rng.choice(idx, size=k, replace=False))
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.setdiff1d(np.arange(n), train_idx)
    if test_idx.size == 0:
        warnings.warn(f"{ds.name}: whole dataset used for training, test set is empty", stacklevel=2)
    return ds.subset(train_idx, ":train"), ds.subset(test_idx, ":test")
