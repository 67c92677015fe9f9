"""
Weighted multi-equation Lasso with data-driven penalty loadings.

All J equations share one coefficient vector:

    min_beta  sum_j (1/N) ||f_j - M_j beta||^2 + 2 lambda sum_l D_l |beta_l|

Coordinate descent runs on the pooled Gram H = sum_j M_j'M_j / N and
h = sum_j M_j'f_j / N, keeping the gradient h - H beta up to date after
every coordinate move.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm

from orthoprod.config import SolverConfig, default_c2
from orthoprod.errors import ArgumentError, InitializationError, NumericError

logger = logging.getLogger(__name__)

KKT_SLACK = 1e-8


@dataclass(frozen=True)
class PenaltyState:
    lam: float
    loadings: np.ndarray
    c1: float
    c2: float


@dataclass
class LassoSolution:
    beta: np.ndarray
    objective: float
    sweeps: int
    history: np.ndarray = field(default_factory=lambda: np.empty(0))
    loadings: Optional[np.ndarray] = None
    lam: float = 0.0
    iterations: int = 0

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.beta != 0.0)


def _stack(design, f):
    M = getattr(design, "matrices", design)
    M = np.asarray(M, dtype=float)
    f = np.asarray(f, dtype=float)
    if M.ndim == 2:
        M = M[None]
    if f.ndim == 1:
        f = f[None]
    if f.shape != M.shape[:2]:
        raise ArgumentError(f"Targets of shape {f.shape} do not match design of shape {M.shape}")
    return M, f


def gram_moments(M, f):
    """(H, h, mean squared target) pooled over equations."""
    N = M.shape[1]
    H = np.einsum("jnk,jnl->kl", M, M) / N
    h = np.einsum("jnk,jn->k", M, f) / N
    return H, h, float(np.sum(f * f) / N)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lambda_rule(n_train: int, r: int, c1: float = 1.1, c2: Optional[float] = None) -> float:
    """lambda = c1 / n_train^(1/4) * Phi^-1(1 - c2 / (2r))."""
    if n_train < 2 or r < 1:
        raise ArgumentError(f"Penalty rule needs n_train >= 2 and r >= 1, got {n_train}, {r}")
    c2 = default_c2(n_train, r) if c2 is None else c2
    tail = c2 / (2 * r)
    if not 0.0 < tail < 1.0:
        raise ArgumentError(f"c2/(2r) = {tail} must lie in (0, 1)")
    return float(c1 / n_train ** 0.25 * norm.ppf(1.0 - tail))


def penalty_objective(H, h, ff, beta, loadings, lam) -> float:
    return float(ff - 2 * h @ beta + beta @ H @ beta + 2 * lam * np.sum(loadings * np.abs(beta)))


def init_beta_lowdim(design, f, low_indices: Sequence[int], jitter: float = 1e-10) -> np.ndarray:
    """Pooled OLS on the low-dimensional columns, zeros elsewhere."""
    M, f = _stack(design, f)
    beta = np.zeros(M.shape[2])
    low = np.asarray(sorted(set(int(i) for i in low_indices)), dtype=int)
    if len(low) == 0:
        return beta
    H, h, _ = gram_moments(M[:, :, low], f)
    ridge = jitter * np.trace(H) / len(low)
    try:
        solution = linalg.solve(H + ridge * np.eye(len(low)), h, assume_a="sym")
    except linalg.LinAlgError as e:
        raise InitializationError(f"Low-dimensional Gram of {len(low)} columns is singular") from e
    if not np.all(np.isfinite(solution)):
        raise InitializationError(f"Low-dimensional Gram of {len(low)} columns is singular")
    beta[low] = solution
    return beta


def update_loadings(design, f, beta, floor: float = 1e-12) -> np.ndarray:
    """D_l = sqrt(mean_i (sum_j M_jil * eps_ji)^2) with eps = f - M beta."""
    M, f = _stack(design, f)
    eps = f - np.einsum("jnk,k->jn", M, beta)
    scores = np.einsum("jnk,jn->nk", M, eps)
    return np.maximum(np.sqrt(np.mean(scores ** 2, axis=0)), floor)


def kkt_violation(design, f, beta, loadings, lam) -> float:
    """Largest violation of the Lasso optimality conditions over coordinates."""
    M, f = _stack(design, f)
    H, h, _ = gram_moments(M, f)
    return _kkt(h - H @ beta, beta, loadings, lam)


def _kkt(grad, beta, loadings, lam) -> float:
    bound = loadings * lam
    active = beta != 0.0
    inactive_gap = np.maximum(np.abs(grad) - bound, 0.0)
    active_gap = np.abs(grad - np.sign(beta) * bound)
    return float(np.max(np.where(active, active_gap, inactive_gap), initial=0.0))


def coordinate_descent(design, f, beta_init, loadings, lam: float, tol: float = 1e-7,
                       max_sweeps: int = 1000, kkt_tol: float = 1e-9) -> LassoSolution:
    """
    Cyclic coordinate descent in ascending index order. Coordinates with a
    zero diagonal stay where they are. Stops once a sweep moves no coordinate
    by ``tol`` or more and the optimality conditions hold to ``kkt_tol``.
    """
    M, f = _stack(design, f)
    H, h, ff = gram_moments(M, f)
    loadings = np.asarray(loadings, dtype=float)
    beta = np.array(beta_init, dtype=float)
    grad = h - H @ beta
    history = [penalty_objective(H, h, ff, beta, loadings, lam)]

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_delta = 0.0
        for l in range(len(beta)):
            B = H[l, l]
            A = grad[l] + B * beta[l]
            if not (np.isfinite(A) and np.isfinite(B)):
                raise NumericError(f"Non-finite coordinate-descent update at coordinate {l}")
            if B <= 0.0:
                continue
            new = soft_threshold(A, loadings[l] * lam) / B
            delta = new - beta[l]
            if delta != 0.0:
                grad -= H[:, l] * delta
                beta[l] = new
                max_delta = max(max_delta, abs(delta))
        grad = h - H @ beta
        history.append(penalty_objective(H, h, ff, beta, loadings, lam))
        if max_delta < tol and _kkt(grad, beta, loadings, lam) <= kkt_tol:
            break
    else:
        logger.debug(f"Coordinate descent hit the {max_sweeps}-sweep cap")

    return LassoSolution(beta=beta, objective=history[-1], sweeps=sweeps, history=np.asarray(history),
                         loadings=loadings, lam=lam)


def solve_weighted_lasso(design, f, lam: float, low_indices: Sequence[int],
                         solver: Optional[SolverConfig] = None) -> LassoSolution:
    """
    Initialize by low-dimensional OLS, then alternate loading updates and
    warm-started coordinate descent until beta stabilizes.
    """
    solver = solver or SolverConfig()
    M, f = _stack(design, f)
    beta = init_beta_lowdim(M, f, low_indices, solver.gram_jitter)
    solution = None
    for iteration in range(1, solver.max_loading_iter + 1):
        loadings = update_loadings(M, f, beta, solver.loading_floor)
        solution = coordinate_descent(M, f, beta, loadings, lam, solver.cd_tol, solver.max_sweeps)
        change = np.linalg.norm(solution.beta - beta)
        beta = solution.beta
        solution.iterations = iteration
        if change <= solver.loading_tol * max(np.linalg.norm(beta), 1e-12):
            break
    logger.debug(
        f"Lasso: lambda={lam:.6g}, {len(solution.active)} active of {len(beta)}, "
        f"{solution.iterations} loading iterations, {solution.sweeps} sweeps"
    )
    return solution
