"""Observational dataset container and its on-disk CSV format.

Rows are ``(x, a, y)`` with covariates of dimension ``d_x``, a scalar
treatment (binary in {0, 1} or continuous), and outcomes of dimension
``d_y >= 1``. The CSV header is ``x_1..x_{d_x}, a, y_1..y_{d_y}``; values
are float64 decimal text with no missing entries. Floats are written with
``repr`` so that files round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset", "save_dataset", "load_dataset"]


@dataclass
class Dataset:
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    treatment_type: str = "binary"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y.reshape(-1, 1)
        n = self.x.shape[0]
        if self.a.shape[0] != n or self.y.shape[0] != n:
            raise ValueError(
                f"row mismatch: x={self.x.shape[0]}, a={self.a.shape[0]}, y={self.y.shape[0]}"
            )
        if not np.all(np.isfinite(self.x)) or not np.all(np.isfinite(self.a)) or not np.all(
            np.isfinite(self.y)
        ):
            raise ValueError("dataset contains non-finite values")
        if self.treatment_type not in ("binary", "continuous"):
            raise ValueError(f"unknown treatment_type: {self.treatment_type!r}")
        if self.treatment_type == "binary" and not np.all(np.isin(self.a, (0.0, 1.0))):
            raise ValueError("binary treatment values must be in {0, 1}")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def d_y(self):
        return self.y.shape[1]

    def subset(self, idx):
        return Dataset(self.x[idx], self.a[idx], self.y[idx], self.treatment_type)

    def split(self, val_fraction, rng):
        """Deterministic shuffled train/validation split."""
        perm = rng.permutation(self.n)
        n_val = int(round(self.n * val_fraction))
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])


def save_dataset(dataset, path):
    header = (
        [f"x_{i + 1}" for i in range(dataset.d_x)]
        + ["a"]
        + [f"y_{i + 1}" for i in range(dataset.d_y)]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(dataset.n):
            row = list(dataset.x[i]) + [dataset.a[i]] + list(dataset.y[i])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path, treatment_type=None):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    d_x = sum(1 for c in header if c.startswith("x_"))
    d_y = sum(1 for c in header if c.startswith("y_"))
    if d_x + d_y + 1 != len(header) or "a" not in header:
        raise ValueError(f"unrecognized dataset header: {header}")
    values = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    x = values[:, :d_x]
    a = values[:, d_x]
    y = values[:, d_x + 1 :]
    if treatment_type is None:
        treatment_type = "binary" if np.all(np.isin(a, (0.0, 1.0))) else "continuous"
    return Dataset(x, a, y, treatment_type)
