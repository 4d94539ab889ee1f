"""Tabular datasets: schema-driven CSV loading, synthetic generators, splitting
and standardization.

Feature matrices are always float64. Labels are integers in ``{0, ..., C-1}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"
FEATURE = "feature"
LABEL = "label"


class DataError(ValueError):
    """Raised when a dataset or schema violates its contract."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = CONTINUOUS
    role: str = FEATURE

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, BINARY):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in (FEATURE, LABEL):
            raise DataError(f"column {self.name!r}: unknown role {self.role!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "role": self.role}


def validate_schema(schema: Sequence[ColumnSpec]) -> None:
    labels = [c for c in schema if c.role == LABEL]
    if len(labels) != 1:
        raise DataError(f"schema must have exactly one label column, found {len(labels)}")
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise DataError("schema has duplicate column names")
    if not any(c.role == FEATURE for c in schema):
        raise DataError("schema has no feature columns")


def load_schema(path: str | Path) -> list[ColumnSpec]:
    """Read a JSON sidecar: an array of ``{name, kind, role}`` objects."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DataError("schema file must contain a JSON array")
    schema = [ColumnSpec(**entry) for entry in raw]
    validate_schema(schema)
    return schema


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map fitted on a training split.

    Only continuous columns are scaled. Columns with zero spread are flagged
    in ``degenerate`` and passed through unchanged.
    """

    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # bool mask of columns actually transformed
    degenerate: np.ndarray  # bool mask of continuous columns with std == 0

    def transform_array(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = X.copy()
        cols = self.scaled
        out[..., cols] = (X[..., cols] - self.mean[cols]) / self.std[cols]
        return out

    def inverse_array(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = X.copy()
        cols = self.scaled
        out[..., cols] = X[..., cols] * self.std[cols] + self.mean[cols]
        return out

    def transform(self, ds: "Dataset") -> "Dataset":
        if ds.standardization is not None:
            raise DataError("dataset is already standardized")
        return replace(ds, X=self.transform_array(ds.X), standardization=self)

    def inverse(self, ds: "Dataset") -> "Dataset":
        return replace(ds, X=self.inverse_array(ds.X), standardization=None)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    specs: tuple[ColumnSpec, ...]
    n_classes: int
    standardization: Standardizer | None = None
    row_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise DataError("X must be a 2-D matrix")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]} labels")
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in 0..{self.n_classes - 1}")
        if len(self.feature_specs) != X.shape[1]:
            raise DataError("feature specs do not match X column count")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.row_ids is None:
            object.__setattr__(self, "row_ids", np.arange(X.shape[0]))

    @property
    def feature_specs(self) -> list[ColumnSpec]:
        return [c for c in self.specs if c.role == FEATURE]

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([c.kind == BINARY for c in self.feature_specs], dtype=bool)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx], row_ids=self.row_ids[idx])


def load_csv(path: str | Path, schema: Sequence[ColumnSpec]) -> Dataset:
    """Parse a headered CSV into a :class:`Dataset` typed by ``schema``.

    Columns not named in the schema are ignored. Errors name the offending
    column and the 1-based data row.
    """
    validate_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c.name for c in schema if c.name not in header]
        if missing:
            raise DataError(f"{path}: missing column(s): {', '.join(missing)}")
        pos = {c.name: header.index(c.name) for c in schema}
        features = [c for c in schema if c.role == FEATURE]
        label = next(c for c in schema if c.role == LABEL)

        rows, labels = [], []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            values = {}
            for c in schema:
                cell = row[pos[c.name]].strip() if pos[c.name] < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {i}, column {c.name!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"row {i}, column {c.name!r}: non-finite value {cell!r}")
                if c.kind == BINARY and v not in (0.0, 1.0):
                    raise DataError(f"row {i}, column {c.name!r}: binary column holds {cell!r}")
                values[c.name] = v
            lab = values[label.name]
            if lab != int(lab) or lab < 0:
                raise DataError(f"row {i}, column {label.name!r}: label must be a non-negative integer")
            rows.append([values[c.name] for c in features])
            labels.append(int(lab))

    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    return Dataset(
        X=np.array(rows, dtype=np.float64),
        y=y,
        specs=tuple(schema),
        n_classes=max(2, int(y.max()) + 1),
    )


def split(
    ds: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle rows with ``seed`` and cut them into train/val/test."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = ds.n
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} rows cannot give every split at least one row with ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


def fit_standardizer(train: Dataset) -> Standardizer:
    if train.n < 2:
        raise DataError("standardizer needs at least two training rows")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)  # population std
    continuous = ~train.binary_mask
    degenerate = continuous & (std == 0)
    scaled = continuous & ~degenerate
    return Standardizer(
        mean=np.where(scaled, mean, 0.0),
        std=np.where(scaled, std, 1.0),
        scaled=scaled,
        degenerate=degenerate,
    )


def _synthetic_specs(d: int) -> tuple[ColumnSpec, ...]:
    return tuple(ColumnSpec(f"x{i}") for i in range(d)) + (ColumnSpec("y", BINARY, LABEL),)


def make_circles(n: int = 1000, noise_std: float = 0.05, factor: float = 0.5, seed: int = 0) -> Dataset:
    """Two concentric rings: radius 1 is class 0, radius ``factor`` is class 1.

    Angles are uniform; isotropic Gaussian noise is added to each coordinate.
    """
    if n < 2 or n % 2:
        raise DataError(f"n must be a positive even number, got {n}")
    if not 0 < factor < 1:
        raise DataError(f"factor must lie in (0, 1), got {factor}")
    if noise_std < 0:
        raise DataError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    half = n // 2
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    radius = np.r_[np.ones(half), np.full(half, factor)]
    X = np.c_[radius * np.cos(theta), radius * np.sin(theta)]
    if noise_std > 0:
        X = X + rng.normal(0.0, noise_std, size=X.shape)
    y = np.r_[np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)]
    return Dataset(X=X, y=y, specs=_synthetic_specs(2), n_classes=2)


def make_blobs(n: int = 500, d: int = 2, separation: float = 6.0, std: float = 1.0, seed: int = 0) -> Dataset:
    """Two isotropic Gaussian blobs centred at ``-/+ separation/2`` along every axis.

    Samples lying on the wrong side of the bisecting hyperplane are reflected,
    so the two classes are always linearly separable.
    """
    if n < 2 or n % 2:
        raise DataError(f"n must be a positive even number, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    centre = np.full(d, separation / 2)
    X = rng.normal(0.0, std, size=(n, d))
    X[:half] -= centre
    X[half:] += centre
    side = X.sum(axis=1)
    X[:half][side[:half] > 0] *= -1
    X[half:][side[half:] < 0] *= -1
    y = np.r_[np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)]
    return Dataset(X=X, y=y, specs=_synthetic_specs(d), n_classes=2)
