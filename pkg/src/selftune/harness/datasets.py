"""Dataset ingestion: CSV files and synthetic generators, with seeded
splits and train-statistics normalization."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["DatasetError", "load_csv", "split_dataset", "normalize_splits",
           "generate_dataset", "load_dataset"]

_STD_FLOOR = 1e-12


class DatasetError(ValueError):
    """Unusable dataset input (non-numeric cell, empty split, bad spec)."""


def load_csv(path) -> tuple:
    """Read a comma-separated numeric table; the last column is the target.

    A header row is detected by non-numeric cells and skipped.  Decimal
    separator is '.'; any other non-numeric cell reports its row/column.
    Classification targets may be integer class ids (kept as floats here;
    the objective decides how to read them).
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        raw = [row for row in reader if row]
    if not raw:
        raise DatasetError(f"{path}: empty file")
    start = 0
    try:
        [float(c) for c in raw[0]]
    except ValueError:
        start = 1  # header row
    width = len(raw[start]) if start < len(raw) else 0
    if width < 2:
        raise DatasetError(f"{path}: need at least one feature and a target column")
    for r, row in enumerate(raw[start:], start=start + 1):
        if len(row) != width:
            raise DatasetError(f"{path}: row {r} has {len(row)} cells, expected {width}")
        parsed = []
        for c, cell in enumerate(row, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise DatasetError(
                    f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}"
                ) from None
        rows.append(parsed)
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-1], data[:, -1]


def split_dataset(X, t, ratio: float, rng: np.random.Generator) -> tuple:
    """Deterministic shuffled split: floor(ratio * n) rows go to train."""
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")
    n = X.shape[0]
    n_train = int(np.floor(ratio * n))
    if n_train < 1 or n_train >= n:
        raise DatasetError(
            f"split of {n} rows at ratio {ratio} leaves an empty side"
        )
    perm = rng.permutation(n)
    tr, va = perm[:n_train], perm[n_train:]
    return (X[tr], t[tr]), (X[va], t[va])


def normalize_splits(train, valid, normalize_targets: bool = True) -> tuple:
    """Zero-mean/unit-variance using TRAIN statistics only, applied to both
    splits.  Constant columns keep their (zero) deviation rather than
    dividing by ~0."""
    Xtr, ttr = train
    Xva, tva = valid
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd = np.where(sd < _STD_FLOOR, 1.0, sd)
    Xtr = (Xtr - mu) / sd
    Xva = (Xva - mu) / sd
    if normalize_targets:
        tmu = ttr.mean()
        tsd = ttr.std()
        tsd = 1.0 if tsd < _STD_FLOOR else tsd
        ttr = (ttr - tmu) / tsd
        tva = (tva - tmu) / tsd
    return (Xtr, ttr), (Xva, tva)


def generate_dataset(spec: dict, rng: np.random.Generator) -> tuple:
    """Synthetic pools; returns (X, t) to be split like any dataset.

    kinds:
      - ``synthetic_ridge``: gaussian features, linear targets + noise
        (fields n, m, noise).
      - ``synthetic_classification``: two gaussian blobs, integer labels
        (fields n, m, separation).
    """
    kind = spec.get("kind")
    if kind == "synthetic_ridge":
        n, m = int(spec["n"]), int(spec["m"])
        noise = float(spec.get("noise", 0.5))
        w_true = rng.standard_normal(m)
        X = rng.standard_normal((n, m))
        t = X @ w_true + noise * rng.standard_normal(n)
        return X, t
    if kind == "synthetic_classification":
        n, m = int(spec["n"]), int(spec["m"])
        sep = float(spec.get("separation", 2.0))
        half = n // 2
        X0 = rng.standard_normal((half, m)) - sep / 2
        X1 = rng.standard_normal((n - half, m)) + sep / 2
        X = np.concatenate([X0, X1])
        t = np.concatenate([np.zeros(half), np.ones(n - half)])
        return X, t
    raise DatasetError(f"unknown generator kind {kind!r}")


def load_dataset(spec: dict, split_ratio: float, normalize: bool,
                 rng: np.random.Generator, normalize_targets: bool = True) -> tuple:
    """Full pipeline: source -> shuffled split -> train-stats normalization.

    ``spec`` is either ``{"kind": "csv", "path": ...}`` or a generator
    spec.  Returns ``(train, valid)`` pairs of (X, t).
    """
    if spec.get("kind") == "csv":
        X, t = load_csv(spec["path"])
    else:
        X, t = generate_dataset(spec, rng)
    train, valid = split_dataset(X, t, split_ratio, rng)
    if normalize:
        train, valid = normalize_splits(train, valid, normalize_targets)
    return train, valid
