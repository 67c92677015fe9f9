"""
Dictionaries of candidate regressors: exponential bases, their tensor
products, and the standardization that gives every non-constant column mean
zero and unit variance on the fitting sample.
"""

import logging
import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence, Tuple

import numpy as np

from orthoprod.errors import ArgumentError, NumericError

logger = logging.getLogger(__name__)

ZERO_SD_TOL = 1e-12


def default_rates(K: int) -> np.ndarray:
    """K equally spaced rates on [-1, 1]."""
    if K < 1:
        raise ArgumentError(f"Need at least one basis term, got K={K}")
    if K == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, K)


def default_width(n_train: int) -> int:
    """Terms per variable so a two-variable tensor has about n/25 columns."""
    return max(2, int(math.floor(math.sqrt(n_train) / 5)))


def exponential_basis(values, K: int, rates) -> np.ndarray:
    """Columns exp(rate_k * v) for k = 1..K."""
    values = np.asarray(values, dtype=float).reshape(-1)
    rates = np.asarray(rates, dtype=float).reshape(-1)
    if len(rates) != K:
        raise ArgumentError(f"Expected {K} rates, got {len(rates)}")
    if not np.all(np.isfinite(values)):
        raise NumericError("Non-finite input to exponential basis")
    return np.exp(np.outer(values, rates))


def tensor_product(A, B) -> np.ndarray:
    """All pairwise column products, C[:, i*width(B) + j] = A[:, i] * B[:, j]."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != B.shape[0]:
        raise ArgumentError(f"Row mismatch in tensor product: {A.shape[0]} vs {B.shape[0]}")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def exponential_tensor(scaled, rates: Sequence[np.ndarray]) -> np.ndarray:
    """
    Constant column, then the tensor product of one exponential basis per
    column of ``scaled``. The all-zero-rate product duplicates the constant
    and is left out.
    """
    scaled = np.atleast_2d(np.asarray(scaled, dtype=float))
    blocks = [exponential_basis(scaled[:, v], len(r), r) for v, r in enumerate(rates)]
    product = reduce(tensor_product, blocks)
    if not np.all(np.isfinite(product)):
        raise NumericError("Exponential basis overflowed")
    nonzero = reduce(lambda a, b: np.logical_or.outer(a, b).ravel(), [np.asarray(r) != 0.0 for r in rates])
    return np.column_stack([np.ones(len(scaled)), product[:, nonzero]])


@dataclass(frozen=True)
class Dictionary:
    """
    A fitted dictionary gamma(Z).

    When ``rates`` is empty the dictionary standardizes a raw matrix passed to
    ``apply`` directly; otherwise ``apply`` takes the conditioning variables,
    scales them with the stored input statistics and builds the exponential
    tensor basis first. Column 0 of the output is always the constant 1.
    """
    column_means: np.ndarray
    column_sds: np.ndarray
    keep: np.ndarray
    rates: Tuple[np.ndarray, ...] = ()
    input_means: Optional[np.ndarray] = None
    input_sds: Optional[np.ndarray] = None
    dropped: int = 0

    @property
    def r(self) -> int:
        return int(self.keep.sum())

    def raw(self, X) -> np.ndarray:
        if not self.rates:
            return np.asarray(X, dtype=float)
        X = np.asarray(X, dtype=float).reshape(-1, len(self.rates))
        scaled = (X - self.input_means) / self.input_sds
        return exponential_tensor(scaled, self.rates)

    def apply(self, X) -> np.ndarray:
        raw = self.raw(X)
        if raw.shape[1] != len(self.keep):
            raise ArgumentError(f"Dictionary expects {len(self.keep)} raw columns, got {raw.shape[1]}")
        out = (raw - self.column_means) / self.column_sds
        out[:, 0] = 1.0
        return out[:, self.keep]


def fit_standardizer(raw, **transform) -> Dictionary:
    """
    Fit column means and sds of a raw dictionary whose first column is the
    constant. Non-first columns with zero variance are dropped and counted.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise ArgumentError("Standardization needs a matrix with at least 2 rows")
    if not np.all(np.isfinite(raw)):
        raise NumericError("Non-finite entries in raw dictionary")
    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    means[0], sds[0] = 0.0, 1.0
    keep = sds > ZERO_SD_TOL * (1.0 + np.abs(means))
    keep[0] = True
    dropped = int((~keep).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} zero-variance dictionary columns")
    sds = np.where(keep, sds, 1.0)
    return Dictionary(column_means=means, column_sds=sds, keep=keep, dropped=dropped, **transform)


def fit_dictionary(X, K: Optional[int] = None, rates: Optional[Sequence[float]] = None) -> Dictionary:
    """
    Exponential tensor dictionary on the columns of X, fitted on X.

    Inputs are centred and scaled by their sample sd before exponentiation.
    The all-zero-rate product (a constant) is replaced by the leading
    constant column.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise NumericError("Non-finite conditioning variables")
    K = K or default_width(X.shape[0])
    base = default_rates(K) if rates is None else np.asarray(rates, dtype=float)
    rates = tuple(base for _ in range(X.shape[1]))
    input_means = X.mean(axis=0)
    input_sds = X.std(axis=0)
    input_sds = np.where(input_sds > 0, input_sds, 1.0)
    raw = exponential_tensor((X - input_means) / input_sds, rates)
    return fit_standardizer(raw, rates=rates, input_means=input_means, input_sds=input_sds)
