import logging
from abc import ABC, abstractmethod
from itertools import islice

import numpy as np
from scipy import linalg
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.linear_model import LinearRegression

from orthoprod.basis import Dictionary, fit_dictionary
from orthoprod.config import RegressorSpec
from orthoprod.errors import ArgumentError, FitError

logger = logging.getLogger(__name__)


class Regressor(ABC):
    """
    Abstract base class for first-stage learners of E[y | X].
    Implement fit(X, y) and predict(X); fits must be deterministic in ``seed``.
    """
    min_rows = 2

    def __init__(self, seed=0):
        self.seed = int(seed)

    @abstractmethod
    def fit(self, X, y, sample_weight=None):
        pass

    @abstractmethod
    def predict(self, X):
        pass


# Registry for first-stage learners
REGRESSOR_REGISTRY = {}


def register_regressor(name):
    def decorator(cls):
        REGRESSOR_REGISTRY[name] = cls
        return cls
    return decorator


@register_regressor('gradient_boosted_trees')
class BoostedTrees(Regressor):
    """
    Stagewise squared-error boosting of depth-limited trees.

    The learner trains on the first ``train_fraction`` of a seed-shuffled
    row order and records the staged loss on the remainder. Boosting starts
    from a least-squares fit on X when ``linear_init`` is set, otherwise from
    the mean. With ``select_stages`` the prediction uses the stage count that
    minimizes the validation loss; without it, or without validation rows,
    the first ``predict_trees`` stages.
    """

    def __init__(self, seed=0, n_trees=2000, max_depth=3, min_node_size=10, shrinkage=0.001,
                 bag_fraction=0.5, train_fraction=0.5, predict_trees=500, linear_init=1.0,
                 select_stages=1.0):
        super().__init__(seed)
        self.n_trees = int(n_trees)
        self.max_depth = int(max_depth)
        self.min_node_size = int(min_node_size)
        self.shrinkage = float(shrinkage)
        self.bag_fraction = float(bag_fraction)
        self.train_fraction = float(train_fraction)
        self.predict_trees = min(int(predict_trees), self.n_trees)
        self.linear_init = bool(linear_init)
        self.select_stages = bool(select_stages)
        self.min_rows = 2 * self.min_node_size
        self.model = None
        self.validation_loss_ = None
        self.stages_ = self.predict_trees

    def fit(self, X, y, sample_weight=None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n = len(y)
        if n < self.min_rows:
            raise FitError(f"Boosting needs at least {self.min_rows} rows, got {n}")
        order = np.random.default_rng(self.seed).permutation(n)
        n_train = n if self.train_fraction >= 1.0 else max(self.min_rows, int(round(self.train_fraction * n)))
        n_train = min(n_train, n)
        train, valid = order[:n_train], order[n_train:]
        weights = None if sample_weight is None else np.asarray(sample_weight, dtype=float)[train]
        self.model = GradientBoostingRegressor(
            loss='squared_error',
            n_estimators=self.n_trees,
            max_depth=self.max_depth,
            min_samples_leaf=self.min_node_size,
            learning_rate=self.shrinkage,
            subsample=self.bag_fraction,
            init=LinearRegression() if self.linear_init else None,
            random_state=self.seed,
        )
        self.model.fit(X[train], y[train], sample_weight=weights)
        self.stages_ = self.predict_trees
        if len(valid):
            self.validation_loss_ = np.array([
                np.mean((y[valid] - pred) ** 2) for pred in self.model.staged_predict(X[valid])
            ])
            if self.select_stages:
                self.stages_ = int(np.argmin(self.validation_loss_)) + 1
                if self.stages_ == self.n_trees:
                    logger.debug(f"Validation loss still falling after {self.n_trees} stages")
        return self

    @property
    def train_loss_(self):
        return self.model.train_score_

    def predict(self, X):
        if self.model is None:
            raise FitError("Boosted trees used before fit")
        X = np.asarray(X, dtype=float)
        staged = self.model.staged_predict(X)
        return next(islice(staged, self.stages_ - 1, None))


@register_regressor('ridge_basis')
class RidgeBasis(Regressor):
    """Closed-form ridge regression on a standardized exponential dictionary of X."""

    def __init__(self, seed=0, ridge=1.0, terms_per_variable=5, dictionary=None):
        super().__init__(seed)
        if ridge <= 0:
            raise ArgumentError(f"Ridge penalty must be positive, got {ridge}")
        self.ridge = float(ridge)
        self.terms_per_variable = int(terms_per_variable)
        self.dictionary: Dictionary = dictionary
        self.coef_ = None

    def design(self, X):
        return self.dictionary.apply(X)

    def fit(self, X, y, sample_weight=None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0]:
            raise ArgumentError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if self.dictionary is None:
            self.dictionary = fit_dictionary(X, K=self.terms_per_variable)
        G = self.design(X)
        w = np.ones(len(G)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        gram = G.T @ (G * w[:, None])
        # constant column is not penalized
        penalty = np.full(G.shape[1], self.ridge)
        penalty[0] = 0.0
        self.coef_ = linalg.solve(gram + np.diag(penalty), G.T @ (y.T * w).T, assume_a='sym')
        return self

    def predict(self, X):
        if self.coef_ is None:
            raise FitError("Ridge basis used before fit")
        return self.design(X) @ self.coef_


def get_regressor(spec=None, seed=0, **overrides):
    """
    Build an unfitted learner from a RegressorSpec (defaults filled in).
    """
    spec = spec or RegressorSpec()
    if spec.kind not in REGRESSOR_REGISTRY:
        raise ValueError(f"Unknown regressor: {spec.kind}")
    params = {**spec.resolved(), **overrides}
    return REGRESSOR_REGISTRY[spec.kind](seed=seed, **params)


def fit_gbt(X, y, spec=None, seed=0):
    spec = spec or RegressorSpec(kind='gradient_boosted_trees')
    if spec.kind != 'gradient_boosted_trees':
        raise ArgumentError(f"fit_gbt needs a gradient_boosted_trees spec, got {spec.kind}")
    return get_regressor(spec, seed=seed).fit(X, y)


def fit_ridge_basis(X, y, dictionary=None, ridge=1.0, sample_weight=None):
    return RidgeBasis(ridge=ridge, dictionary=dictionary).fit(X, y, sample_weight=sample_weight)


from orthoprod.firststage.crossfit import (  # noqa: E402
    ConditionalExpectation,
    CrossfitEta,
    EtaTarget,
    conditional_expectation,
    crossfit_eta,
    fit_conditional_expectation,
)
