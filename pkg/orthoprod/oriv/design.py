"""
Generated design matrices M_j for the OR-IV program.

A design holds, for each CMR j, the regressors whose span the OR-IV
residual must be orthogonal to, evaluated on the training rows of a fold.
Both builders return an evaluator so the same design can be computed on
every firm when the residuals kappa = f - M beta are extracted.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from orthoprod.basis import Dictionary
from orthoprod.config import RegressorSpec
from orthoprod.data import PanelDataset
from orthoprod.errors import DesignError
from orthoprod.firststage import ConditionalExpectation, fit_conditional_expectation
from orthoprod.moments import MomentSystem
from orthoprod.utils import child_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProductionEvaluator:
    """M_j(Z_j) = factor_j * gamma_s(Z_j) with s the eta period of CMR j."""
    system: MomentSystem
    dictionaries: Tuple[Dictionary, ...]
    factors: np.ndarray

    def __call__(self, panel: PanelDataset, rows=None) -> np.ndarray:
        blocks = []
        for j, cmr in enumerate(self.system.cmrs):
            gamma = self.dictionaries[cmr.eta].apply(self.system.conditioning_values(panel, j, rows))
            blocks.append(self.factors[j] * gamma)
        return np.stack(blocks)


@dataclass(frozen=True)
class GeneralEvaluator:
    """Outer conditional expectations given Z_j, one fitted model per CMR (None for a zero block)."""
    system: MomentSystem
    models: Tuple[Optional[ConditionalExpectation], ...]
    width: int

    def __call__(self, panel: PanelDataset, rows=None) -> np.ndarray:
        n = panel.n_firms if rows is None else len(rows)
        out = np.zeros((self.system.J, n, self.width))
        for j, model in enumerate(self.models):
            if model is not None:
                out[j] = model.predict(self.system.conditioning_values(panel, j, rows)).reshape(n, self.width)
        return out


@dataclass
class GeneratedDesign:
    fold: int
    matrices: np.ndarray
    theta_omega: float
    rows: np.ndarray
    evaluator: Callable = field(repr=False)
    kind: str = "production"

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrices)):
            raise DesignError(f"Fold {self.fold}: design has non-finite entries")

    @property
    def J(self) -> int:
        return self.matrices.shape[0]

    @property
    def r(self) -> int:
        return self.matrices.shape[2]

    def evaluate(self, panel: PanelDataset, rows=None) -> np.ndarray:
        """Design values (J, rows, r) at arbitrary firms of the panel."""
        return self.evaluator(panel, rows)


def _check_widths(dictionaries):
    widths = {d.r for d in dictionaries}
    if len(widths) != 1:
        raise DesignError(f"Per-period dictionaries have different widths {sorted(widths)}")
    return widths.pop()


def production_factors(system: MomentSystem, theta_omega: float) -> np.ndarray:
    """
    Coefficients on gamma_s(Z_j) once beta is shared across the CMRs
    conditioned on the same Z: (1 + theta_omega) for first-stage CMRs and
    theta_omega * (1 + theta_omega) for structural ones.
    """
    scale = 1.0 + theta_omega
    return np.array([scale if cmr.role == "first_stage" else theta_omega * scale for cmr in system.cmrs])


def build_design_production(panel: PanelDataset, rows, system: MomentSystem,
                            dictionaries: Sequence[Dictionary], theta_omega: float,
                            fold: int = 0) -> GeneratedDesign:
    """Closed-form design for the proxy-variable systems; needs no conditional expectations."""
    if not np.isfinite(theta_omega):
        raise DesignError(f"Fold {fold}: preliminary theta_omega is not finite ({theta_omega})")
    dictionaries = tuple(dictionaries)
    if len(dictionaries) != system.n_eta:
        raise DesignError(f"Need {system.n_eta} per-period dictionaries, got {len(dictionaries)}")
    _check_widths(dictionaries)
    rows = np.asarray(rows, dtype=int)
    evaluator = ProductionEvaluator(system, dictionaries, production_factors(system, theta_omega))
    return GeneratedDesign(fold=fold, matrices=evaluator(panel, rows), theta_omega=float(theta_omega),
                           rows=rows, evaluator=evaluator)


def three_way_split(rows, seed: int = 0):
    """Random split of ``rows`` into parts A, B, C of (near) equal size."""
    rows = np.asarray(rows, dtype=int)
    shuffled = np.random.default_rng(seed).permutation(rows)
    parts = np.array_split(shuffled, 3)
    if any(len(p) == 0 for p in parts):
        raise DesignError(f"Cannot split {len(rows)} rows into three nonempty parts")
    return tuple(np.sort(p) for p in parts)


def constant_nu(system: MomentSystem):
    """nu_tilde evaluator for systems whose derivative coefficients do not depend on the data."""
    def evaluate(theta, panel, rows):
        return np.broadcast_to(system.nu_tilde(theta), (len(rows), system.J, system.n_eta))
    return evaluate


def build_design_general(panel: PanelDataset, rows, system: MomentSystem,
                         dictionaries: Sequence[Dictionary], theta_a, theta_b,
                         spec: Optional[RegressorSpec] = None, nu=None, split=None,
                         shared_beta: bool = True, fold: int = 0, seed: int = 0) -> GeneratedDesign:
    """
    Design from nested estimated conditional expectations.

    With V_s the conditioning variables of eta_s, entry (j, (j', k)) is

        E_C[ sum_s nu_{j,s}(theta_B) * E_B[nu_{j',s}(theta_A) gamma_{j'k}(Z_j') | V_s] | Z_j ]

    where each E_P is a regression fitted on part P of the training rows.
    ``shared_beta`` sums the j' blocks so all CMRs share one coefficient vector.
    """
    spec = spec or RegressorSpec(kind="ridge_basis")
    nu = nu or constant_nu(system)
    rows = np.asarray(rows, dtype=int)
    part_a, part_b, part_c = split if split is not None else three_way_split(rows, seed)
    if any(len(p) == 0 for p in (part_a, part_b, part_c)):
        raise DesignError(f"Fold {fold}: empty part in the three-way split")
    dictionaries = tuple(dictionaries)
    r = _check_widths(dictionaries)
    J, S = system.J, system.n_eta

    nu_a = np.asarray(nu(theta_a, panel, part_b))
    nu_b = np.asarray(nu(theta_b, panel, part_c))
    targets = system.eta_targets()

    # inner[j'][s]: E_B[nu_{j',s} gamma_{j'} | V_s] evaluated on part C
    inner: Dict[Tuple[int, int], np.ndarray] = {}
    for jp, cmr in enumerate(system.cmrs):
        gamma_b = dictionaries[cmr.eta].apply(system.conditioning_values(panel, jp, part_b))
        for s in range(S):
            weight = nu_a[:, jp, s]
            if not np.any(weight != 0.0):
                continue
            inner[(jp, s)] = fit_conditional_expectation(
                spec, targets[s].design(panel, part_b), weight[:, None] * gamma_b, seed=child_seed(seed, jp, s)
            ).predict(targets[s].design(panel, part_c))

    width = r if shared_beta else J * r
    models = []
    for j in range(J):
        blocks = np.zeros((len(part_c), J, r))
        for (jp, s), values in inner.items():
            blocks[:, jp, :] += nu_b[:, j, s, None] * values
        response = blocks.sum(axis=1) if shared_beta else blocks.reshape(len(part_c), J * r)
        if not np.any(response != 0.0):
            models.append(None)
            continue
        models.append(fit_conditional_expectation(
            spec, system.conditioning_values(panel, j, part_c), response, seed=child_seed(seed, J + j)
        ))
    evaluator = GeneralEvaluator(system, tuple(models), width)
    theta_omega = float(np.asarray(theta_b)[-1])
    logger.debug(f"Fold {fold}: general design with parts of size {len(part_a)}/{len(part_b)}/{len(part_c)}")
    return GeneratedDesign(fold=fold, matrices=evaluator(panel, rows), theta_omega=theta_omega,
                           rows=rows, evaluator=evaluator, kind="general")
