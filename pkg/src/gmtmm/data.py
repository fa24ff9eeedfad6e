"""Observed responses with a missingness mask and unit weights."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class Dataset:
    """N units x V variables, columns in design-variable order.

    Missing entries are marked False in ``mask``; their value in ``y`` is
    ignored (stored as NaN). Categorical codes are 0-based.
    """

    y: np.ndarray
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2:
            raise DataError("response matrix must be two-dimensional")
        mask = ~np.isnan(y) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != y.shape:
            raise DataError("mask shape differs from response shape")
        y = np.where(mask, y, np.nan)
        w = np.ones(len(y)) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (len(y),):
            raise DataError("need one weight per unit")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and nonnegative")
        for arr in (y, mask, w):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_vars(self) -> int:
        return self.y.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        return (isinstance(other, Dataset) and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.y[self.mask], other.y[other.mask])
                and np.array_equal(self.weights, other.weights))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.mask[rows], self.weights[rows])

    def with_weights(self, weights) -> "Dataset":
        return Dataset(self.y, self.mask, weights)

    def retained(self, warn=True) -> "Dataset":
        """Drop units without any observed entry."""
        keep = self.mask.any(axis=1)
        if keep.all():
            return self
        if warn:
            warnings.warn(f"excluding {int((~keep).sum())} unit(s) with no observed response",
                          stacklevel=2)
        return self.subset(np.flatnonzero(keep))

    def check(self, design) -> None:
        """Raise DataError if shape or support does not match ``design``."""
        if self.n_vars != design.n_vars:
            raise DataError(f"data has {self.n_vars} columns, design has {design.n_vars} variables")
        for j, v in enumerate(design.variables):
            col = self.y[self.mask[:, j], j]
            ok = v.family.check(col)
            if not np.all(ok):
                bad = np.flatnonzero(self.mask[:, j])[~ok][0]
                raise DataError(f"row {bad}: value {self.y[bad, j]!r} of {design.variable_label(j)} "
                                f"outside the {v.family.name} support")
