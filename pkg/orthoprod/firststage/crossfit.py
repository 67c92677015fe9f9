"""
Cross-fitted first-stage predictions.

For target s and fold l the learner is fitted on the complement of I_l and
predicts both on I_l (held-out values used in moments) and on the complement
(in-sample values used inside fold-l design matrices).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from orthoprod.data import FoldPlan, PanelDataset
from orthoprod.errors import FitError, SchemaError
from orthoprod.firststage import get_regressor
from orthoprod.utils import child_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EtaTarget:
    """Regression of ``response`` = (variable, period) on ``conditioning`` (variable, period) pairs."""
    name: str
    response: Tuple[str, int]
    conditioning: Tuple[Tuple[str, int], ...]

    def design(self, panel: PanelDataset, rows=None) -> np.ndarray:
        X = np.column_stack([panel.column(v, t) for v, t in self.conditioning])
        return X if rows is None else X[rows]

    def outcome(self, panel: PanelDataset, rows=None) -> np.ndarray:
        y = panel.column(*self.response)
        return y if rows is None else y[rows]


@dataclass
class CrossfitEta:
    targets: Sequence[EtaTarget]
    folds: FoldPlan
    models: Dict[Tuple[int, int], object]
    held_out: np.ndarray
    in_sample: Dict[int, np.ndarray] = field(default_factory=dict)

    def predict(self, target: int, fold: int, X) -> np.ndarray:
        """Evaluate the fold-l model of one target at arbitrary conditioning values."""
        if (target, fold) not in self.models:
            raise FitError(f"No first-stage model for target {target}, fold {fold}")
        return self.models[(target, fold)].predict(X)

    def fold_training_values(self, fold: int) -> np.ndarray:
        """In-sample predictions on the complement of I_l, rows ordered as folds.training(l)."""
        return self.in_sample[fold]

    def stage_counts(self) -> Dict[str, List[int]]:
        """Boosting stages used for prediction, per target and fold; empty for other learners."""
        counts = {}
        for (s, fold), model in sorted(self.models.items()):
            if hasattr(model, "stages_"):
                counts.setdefault(self.targets[s].name, []).append(int(model.stages_))
        return counts


def _fit_one(panel, target, train, held, spec, seed):
    model = get_regressor(spec, seed=seed)
    X_train = target.design(panel, train)
    if len(train) < model.min_rows:
        raise FitError(f"only {len(train)} training rows, need {model.min_rows}")
    model.fit(X_train, target.outcome(panel, train))
    return model, model.predict(target.design(panel, held)), model.predict(X_train)


def crossfit_eta(panel: PanelDataset, folds: FoldPlan, spec, targets: Sequence[EtaTarget],
                 seed: int = 0, workers: int = 1) -> CrossfitEta:
    if folds.n_firms != panel.n_firms:
        raise FitError(f"Fold plan covers {folds.n_firms} firms but panel has {panel.n_firms}")
    for target in targets:
        for v, t in (target.response, *target.conditioning):
            if not panel.has(v):
                raise SchemaError(f"First-stage target {target.name} needs variable {v!r}")

    jobs = [(s, fold) for s in range(len(targets)) for fold in range(folds.n_folds)]

    def run(s, fold):
        try:
            return _fit_one(panel, targets[s], folds.training(fold), folds.held_out(fold), spec,
                            child_seed(seed, s, fold))
        except FitError as e:
            raise FitError(f"First stage {targets[s].name}, fold {fold}: {e}") from e

    results = Parallel(n_jobs=workers)(delayed(run)(s, fold) for s, fold in jobs)

    held_out = np.full((panel.n_firms, len(targets)), np.nan)
    in_sample = {fold: np.empty((len(folds.training(fold)), len(targets))) for fold in range(folds.n_folds)}
    models = {}
    for (s, fold), (model, pred_held, pred_train) in zip(jobs, results):
        models[(s, fold)] = model
        held_out[folds.held_out(fold), s] = pred_held
        in_sample[fold][:, s] = pred_train
    logger.info(f"Cross-fitted {len(targets)} first-stage targets over {folds.n_folds} folds")
    return CrossfitEta(targets=targets, folds=folds, models=models, held_out=held_out, in_sample=in_sample)


class ConditionalExpectation:
    """
    Fitted E[Y | X] for a vector or matrix response. Ridge fits all columns in
    one solve; other learners fit column by column.
    """

    def __init__(self, models, columns=None):
        self.models = models
        self.columns = columns

    def predict(self, X) -> np.ndarray:
        if self.columns is None:
            return self.models[0].predict(X)
        return np.column_stack([model.predict(X) for model in self.models])


def fit_conditional_expectation(spec, X_fit, Y_fit, seed: int = 0) -> ConditionalExpectation:
    Y_fit = np.asarray(Y_fit, dtype=float)
    if Y_fit.ndim == 1 or spec.kind == 'ridge_basis':
        return ConditionalExpectation([get_regressor(spec, seed=seed).fit(X_fit, Y_fit)])
    models = [get_regressor(spec, seed=child_seed(seed, c)).fit(X_fit, Y_fit[:, c]) for c in range(Y_fit.shape[1])]
    return ConditionalExpectation(models, columns=Y_fit.shape[1])


def conditional_expectation(spec, X_fit, Y_fit, X_eval, seed: int = 0) -> np.ndarray:
    """Fit E[Y | X] on (X_fit, Y_fit) and evaluate at X_eval."""
    return fit_conditional_expectation(spec, X_fit, Y_fit, seed).predict(X_eval)
