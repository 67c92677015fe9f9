"""
Per-fold OR-IV construction.

For fold l, everything is fitted on the training rows I_l^c: a preliminary
plug-in estimate of theta, the per-period dictionaries, the generated design
and the penalty level. Each starting instrument f_q is then residualized on
the design by the weighted Lasso, and kappa = f - M beta is evaluated on
every firm. Firms in I_l later use the kappa of fold l.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from orthoprod.basis import default_width, fit_dictionary
from orthoprod.config import GmmConfig, RegressorSpec, SolverConfig
from orthoprod.data import FoldPlan, PanelDataset
from orthoprod.dgmm import plugin_data, search_theta
from orthoprod.errors import ArgumentError, EstimationError
from orthoprod.firststage import CrossfitEta
from orthoprod.moments import Instrument, MomentSystem, default_menu
from orthoprod.oriv.design import GeneratedDesign, build_design_general, build_design_production, three_way_split
from orthoprod.oriv.lasso import LassoSolution, PenaltyState, lambda_rule, solve_weighted_lasso
from orthoprod.utils import append_jsonl, child_seed

logger = logging.getLogger(__name__)


@dataclass
class FoldFit:
    fold: int
    theta_prelim: np.ndarray
    lam: float
    c1: float
    c2: float
    design: GeneratedDesign
    solutions: List[LassoSolution]
    kappa: np.ndarray  # (q, n, J), all firms

    @property
    def betas(self) -> np.ndarray:
        return np.vstack([s.beta for s in self.solutions])

    @property
    def penalties(self) -> List[PenaltyState]:
        return [PenaltyState(lam=self.lam, loadings=s.loadings, c1=self.c1, c2=self.c2) for s in self.solutions]


@dataclass
class OrivSet:
    folds: FoldPlan
    fits: List[FoldFit]
    menu: Sequence[Instrument] = field(default_factory=tuple)

    @property
    def q(self) -> int:
        return self.fits[0].kappa.shape[0]

    @property
    def theta_prelim(self) -> np.ndarray:
        """(L, P) preliminary estimates, one row per fold."""
        return np.vstack([fit.theta_prelim for fit in self.fits])

    def kappa(self, fold: int) -> np.ndarray:
        return self.fits[fold].kappa

    def cross_fitted(self) -> np.ndarray:
        """kappa values (q, n, J) where firm i takes the OR-IVs of its own fold."""
        out = np.full_like(self.fits[0].kappa, np.nan)
        for fit in self.fits:
            rows = self.folds.held_out(fit.fold)
            out[:, rows, :] = fit.kappa[:, rows, :]
        return out


def fold_dictionaries(panel: PanelDataset, rows, system: MomentSystem, K: Optional[int] = None):
    """One exponential dictionary per eta period, fitted on its conditioning variables over ``rows``."""
    K = K or system.basis_terms_default or default_width(len(rows))
    return tuple(fit_dictionary(target.design(panel, rows), K=K) for target in system.eta_targets())


def low_indices(system: MomentSystem, r: int, low_dim: Optional[int] = None):
    if low_dim is None:
        low_dim = system.low_dim_default if system.low_dim_default is not None else max(1, r // 15)
    return list(range(min(low_dim, r)))


def _subset_theta(panel, rows, train, eta_train, system, gmm, seed, fallback):
    positions = np.searchsorted(train, rows)
    try:
        data = plugin_data(panel.take(rows), system, eta_train[positions])
        return search_theta(data, gmm, seed=seed)[1]
    except EstimationError as e:
        logger.warning(f"Plug-in estimate on a design split part failed ({e}); using the fold estimate")
        return fallback


def _fit_fold(fold, panel, folds, eta, system, instruments, solver, gmm, spec, n_total, seed):
    train = folds.training(fold)
    eta_train = eta.fold_training_values(fold)
    try:
        prelim = plugin_data(panel.take(train), system, eta_train)
        theta_tilde = search_theta(prelim, gmm, seed=child_seed(seed, fold, 0))[1]

        dictionaries = fold_dictionaries(panel, train, system, solver.basis_terms)
        if solver.design == "production":
            design = build_design_production(panel, train, system, dictionaries, theta_tilde[-1], fold=fold)
        else:
            split = three_way_split(train, child_seed(seed, fold, 1))
            theta_a = _subset_theta(panel, split[0], train, eta_train, system, gmm, child_seed(seed, fold, 2),
                                    theta_tilde)
            theta_b = _subset_theta(panel, split[1], train, eta_train, system, gmm, child_seed(seed, fold, 3),
                                    theta_tilde)
            design = build_design_general(panel, train, system, dictionaries, theta_a, theta_b, spec=spec,
                                          split=split, fold=fold, seed=child_seed(seed, fold, 4))

        r = design.r
        c2 = solver.resolve_c2(n_total, r)
        lam = lambda_rule(len(train), r, solver.c1, c2)
        low = low_indices(system, r, solver.low_dim)
        design_all = design.evaluate(panel)
    except EstimationError as e:
        raise type(e)(f"Fold {fold}: {e}") from e

    solutions = []
    kappa = np.empty_like(instruments)
    for q in range(instruments.shape[0]):
        targets = instruments[q][train].T
        try:
            solution = solve_weighted_lasso(design.matrices, targets, lam, low, solver)
        except EstimationError as e:
            raise type(e)(f"Fold {fold}, instrument {q}: {e}") from e
        solutions.append(solution)
        kappa[q] = instruments[q] - np.einsum("jnk,k->nj", design_all, solution.beta)
    logger.info(
        f"Fold {fold}: theta_omega~={theta_tilde[-1]:.4f}, r={r}, lambda={lam:.4g}, "
        f"active per instrument {[len(s.active) for s in solutions]}"
    )
    return FoldFit(fold=fold, theta_prelim=np.asarray(theta_tilde), lam=lam, c1=solver.c1, c2=c2, design=design,
                   solutions=solutions, kappa=kappa)


def dump_solutions(path, orivs: OrivSet) -> Path:
    """Append one JSON line per (fold, instrument) with the Lasso solution."""
    path = Path(path)
    for fit in orivs.fits:
        for q, (solution, penalty) in enumerate(zip(fit.solutions, fit.penalties)):
            append_jsonl(path, {
                "fold": fit.fold,
                "instrument": q,
                "lambda": penalty.lam,
                "c1": penalty.c1,
                "c2": penalty.c2,
                "theta_prelim": fit.theta_prelim,
                "beta": solution.beta,
                "active": solution.active,
                "loadings": penalty.loadings,
                "sweeps": solution.sweeps,
                "loading_iterations": solution.iterations,
            })
    return path


def estimate_orivs(panel: PanelDataset, folds: FoldPlan, eta: CrossfitEta, system: MomentSystem,
                   menu: Optional[Sequence[Instrument]] = None, solver: Optional[SolverConfig] = None,
                   gmm: Optional[GmmConfig] = None, spec: Optional[RegressorSpec] = None,
                   seed: int = 0, workers: int = 1, debug_path=None) -> OrivSet:
    solver = solver or SolverConfig()
    gmm = (gmm or GmmConfig()).model_copy(update={"weighting": "identity"})
    menu = default_menu(system) if menu is None else tuple(menu)
    if not menu:
        raise ArgumentError("Instrument menu is empty")
    instruments = system.evaluate_menu(panel, menu)

    fits = Parallel(n_jobs=workers)(
        delayed(_fit_fold)(fold, panel, folds, eta, system, instruments, solver, gmm, spec,
                           panel.n_firms, seed)
        for fold in range(folds.n_folds)
    )
    orivs = OrivSet(folds=folds, fits=list(fits), menu=menu)
    if debug_path is not None:
        dump_solutions(debug_path, orivs)
    logger.info(f"Built {len(menu)} OR-IVs over {folds.n_folds} folds")
    return orivs
