"""
Debiased GMM on cross-fitted moments.

psi_q = sum_j m_j(W; theta, eta_hat) * kappa_{j,q}(Z_j) is averaged over
firms, each firm using the nuisances of its own fold, and the quadratic form
psi_bar' Lambda psi_bar is minimized. The intercept and the AR(1) coefficient
can be profiled out through the lagged regression of eta_t - X_t'theta_p, so
the search runs over the input elasticities only. Inference uses the
sandwich (U'LU)^-1 U'L Psi L U (U'LU)^-1 with a finite-difference Jacobian.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, optimize

from orthoprod.config import GmmConfig, PiConfig, RegressorSpec
from orthoprod.data import FoldPlan, PanelDataset, make_folds
from orthoprod.errors import (
    ArgumentError,
    BootstrapError,
    EstimationError,
    NumericError,
    ProfilingError,
    StateError,
)
from orthoprod.firststage import crossfit_eta
from orthoprod.models import Z_975, DerivedQuantity, DgmmResult
from orthoprod.moments import MomentSystem, plugin_instruments
from orthoprod.utils import child_rng, child_seed

logger = logging.getLogger(__name__)

PROFILE_GUARD = 1e-6


@dataclass(frozen=True)
class MomentData:
    """
    Everything the GMM objective needs: the panel, held-out eta_hat (n, T-1),
    instrument values (q, n, J) and, optionally, fold-level preliminary
    estimates (L, P) for the variance of the moments.
    """
    system: MomentSystem
    panel: PanelDataset
    eta: np.ndarray
    instruments: np.ndarray
    folds: Optional[FoldPlan] = None
    theta_prelim: Optional[np.ndarray] = None

    def __post_init__(self):
        n, J = self.panel.n_firms, self.system.J
        eta = np.asarray(self.eta, dtype=float)
        instruments = np.asarray(self.instruments, dtype=float)
        if eta.shape != (n, self.system.n_eta):
            raise StateError(f"eta_hat has shape {eta.shape}, expected {(n, self.system.n_eta)}")
        if instruments.ndim != 3 or instruments.shape[1:] != (n, J):
            raise StateError(f"Instrument stack has shape {instruments.shape}, expected (q, {n}, {J})")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "instruments", instruments)

    @property
    def n(self) -> int:
        return self.panel.n_firms

    @property
    def q(self) -> int:
        return self.instruments.shape[0]


def psi_matrix(data: MomentData, theta) -> np.ndarray:
    """Per-firm moment vectors, shape (n, q)."""
    m = data.system.residuals(data.panel, theta, data.eta)
    return np.einsum("nj,qnj->nq", m, data.instruments)


def psi_bar(data: MomentData, theta) -> np.ndarray:
    return psi_matrix(data, theta).mean(axis=0)


def assemble_psi(data: MomentData, i: int, theta) -> np.ndarray:
    """psi for firm i using the nuisances of the fold holding i."""
    if not (np.all(np.isfinite(data.eta[i])) and np.all(np.isfinite(data.instruments[:, i, :]))):
        raise StateError(f"Firm {i} has no cross-fitted nuisances")
    m = data.system.residuals(data.panel.take([i]), theta, data.eta[[i]])[0]
    return data.instruments[:, i, :] @ m


def profile_parameters(theta_p, eta, panel: PanelDataset, system: MomentSystem):
    """
    (theta_1, theta_omega) implied by the input elasticities: slope and
    back-solved intercept of the pooled regression of eta_t - X_t'theta_p on
    its lag.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape[1] < 2:
        raise ProfilingError("Profiling needs first-stage fits in at least two periods")
    X = system.inputs_array(panel)[:, : eta.shape[1], :]
    x = eta - X @ np.atleast_1d(np.asarray(theta_p, dtype=float))
    lead, lag = x[:, 1:].reshape(-1), x[:, :-1].reshape(-1)
    lag_c = lag - lag.mean()
    var = lag_c @ lag_c
    if var <= 1e-14 * max(1.0, lag @ lag):
        raise ProfilingError("Lagged series has no variation; AR(1) slope is undefined")
    slope = (lag_c @ (lead - lead.mean())) / var
    intercept = lead.mean() - slope * lag.mean()
    if abs(1.0 - slope) <= PROFILE_GUARD:
        raise ProfilingError(f"AR(1) slope {slope:.8f} too close to 1 to recover the intercept")
    return intercept / (1.0 - slope), slope


def expand_theta(data: MomentData, free, profile: bool = True) -> np.ndarray:
    free = np.atleast_1d(np.asarray(free, dtype=float))
    if not profile:
        return free
    theta_1, theta_omega = profile_parameters(free, data.eta, data.panel, data.system)
    return np.concatenate([[theta_1], free, [theta_omega]])


def can_profile(system: MomentSystem, profile: bool) -> bool:
    """Profiling needs eta in two periods; shorter panels fall back to the joint search."""
    return bool(profile) and system.n_eta >= 2


def free_names(system: MomentSystem, profile: bool = True):
    return list(system.input_names if profile else system.param_names)


def gmm_objective(theta_free, weighting, data: MomentData, profile: bool = True) -> float:
    """psi_bar' W psi_bar at the (possibly profiled) parameter."""
    pb = psi_bar(data, expand_theta(data, theta_free, profile))
    return float(pb @ np.asarray(weighting, dtype=float) @ pb)


def _search_objective(data, weighting, profile):
    def f(x):
        try:
            value = gmm_objective(x, weighting, data, profile)
        except ProfilingError:
            return np.inf
        return value if np.isfinite(value) else np.inf
    return f


def golden_search(f, lo: float, hi: float, grid_points: int = 101, tol: float = 1e-8):
    """
    Coarse grid then golden section on the best grid cell. A minimum in an
    edge cell is refined by bounded Brent and reported as a boundary optimum
    when it lands on the bracket end.
    """
    grid = np.linspace(lo, hi, grid_points)
    values = np.array([f(x) for x in grid])
    if not np.any(np.isfinite(values)):
        raise NumericError(f"GMM objective is not finite anywhere on [{lo}, {hi}]")
    i = int(np.argmin(values))
    edge = i in (0, grid_points - 1)
    if edge:
        a, b = (grid[0], grid[1]) if i == 0 else (grid[-2], grid[-1])
        res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": tol})
    else:
        try:
            res = optimize.minimize_scalar(
                f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                options={"xtol": tol / max(2.0 * abs(grid[i]), 1.0)},
            )
        except ValueError:
            # flat cell: the bracket condition fails, fall back to bounded search
            res = optimize.minimize_scalar(f, bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                           options={"xatol": tol})
    x, fx = float(res.x), float(res.fun)
    if not fx <= values[i]:
        x, fx = float(grid[i]), float(values[i])
    end = lo if i == 0 else hi
    at_boundary = edge and abs(x - end) <= 1e-5 * (hi - lo)
    return np.array([x]), fx, {"at_boundary": bool(at_boundary), "grid_min": float(grid[i])}


def simplex_search(f, x0, step: float = 0.1, restarts: int = 3, max_iter: int = 4000, seed: int = 0):
    """Nelder-Mead from x0, then ``restarts`` runs from random perturbations of the incumbent."""
    x0 = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    p = len(x0)
    best_x, best_f, runs = x0, f(x0), 0
    for attempt in range(restarts + 1):
        start = x0 if attempt == 0 else best_x + rng.uniform(-5 * step, 5 * step, size=p)
        simplex = np.vstack([start, start + step * np.eye(p)])
        res = optimize.minimize(
            f, start, method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": 1e-9, "fatol": 1e-14, "maxiter": max_iter},
        )
        runs += 1
        if np.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
    if not np.isfinite(best_f):
        raise NumericError("Nelder-Mead found no finite GMM objective value")
    return best_x, best_f, {"at_boundary": False, "runs": runs}


def jacobian_fd(func, theta, scale: float = 1e-5) -> np.ndarray:
    """Central differences with step h_k = scale * (1 + |theta_k|); returns (dim func, dim theta)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    columns = []
    for k in range(len(theta)):
        h = scale * (1.0 + abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        f_up, f_down = np.atleast_1d(func(up)), np.atleast_1d(func(down))
        if not (np.all(np.isfinite(f_up)) and np.all(np.isfinite(f_down))):
            raise NumericError(f"Non-finite moment at perturbed parameter {k}")
        columns.append((f_up - f_down) / (2 * h))
    return np.column_stack(columns)


def sandwich_covariance(upsilon, weighting, psi_cov) -> np.ndarray:
    U = np.atleast_2d(upsilon)
    W = np.asarray(weighting, dtype=float)
    bread = U.T @ W @ U
    try:
        bread_inv = linalg.inv(bread)
    except linalg.LinAlgError as e:
        raise NumericError("Singular GMM Hessian U'WU; parameters are not identified by these moments") from e
    sigma = bread_inv @ (U.T @ W @ psi_cov @ W @ U) @ bread_inv
    return 0.5 * (sigma + sigma.T)


def psi_covariance(data: MomentData, theta) -> np.ndarray:
    """
    Psi_hat = uncentered mean of psi_i psi_i'. With fold-level preliminary
    estimates, firms in I_l are evaluated at the estimate of fold l.
    """
    if data.theta_prelim is not None and data.folds is not None:
        psi = np.empty((data.n, data.q))
        for fold in range(data.folds.n_folds):
            rows = data.folds.held_out(fold)
            psi[rows] = psi_matrix(data, data.theta_prelim[fold])[rows]
    else:
        psi = psi_matrix(data, theta)
    return psi.T @ psi / data.n


def derived_quantities(names, theta, sigma, n):
    """Returns to scale and capital-labour intensity for the two-input system."""
    names = list(names)
    if "theta_l" not in names or "theta_k" not in names:
        return {}
    il, ik = names.index("theta_l"), names.index("theta_k")
    theta_l, theta_k = theta[il], theta[ik]
    out = {}
    g = np.zeros(len(names))
    g[il] = g[ik] = 1.0
    out["returns_to_scale"] = (theta_l + theta_k, g)
    if abs(theta_l) > 1e-12:
        g = np.zeros(len(names))
        g[il], g[ik] = -theta_k / theta_l ** 2, 1.0 / theta_l
        out["capital_labor_intensity"] = (theta_k / theta_l, g)
    result = {}
    for key, (value, grad) in out.items():
        se = float(np.sqrt(max(grad @ sigma @ grad, 0.0) / n))
        result[key] = DerivedQuantity(value=float(value), se=se, ci=[value - Z_975 * se, value + Z_975 * se])
    return result


def search_theta(data: MomentData, gmm: GmmConfig, weighting=None, profile: Optional[bool] = None, seed: int = 0):
    """Point estimate only: returns (free estimate, full theta, objective, diagnostics)."""
    profile = can_profile(data.system, gmm.profile if profile is None else profile)
    W = np.eye(data.q) if weighting is None else weighting
    f = _search_objective(data, W, profile)
    p_inputs = len(data.system.inputs)
    if profile and p_inputs == 1:
        x, fx, info = golden_search(f, gmm.bracket_lo, gmm.bracket_hi, gmm.grid_points, gmm.golden_tol)
    else:
        mid = 0.5 * (gmm.bracket_lo + gmm.bracket_hi)
        if profile:
            x0 = np.full(p_inputs, mid / p_inputs)
        else:
            x0 = np.concatenate([[0.0], np.full(p_inputs, mid / p_inputs), [0.5]])
            if can_profile(data.system, True):
                try:
                    x_prof, _, _, _ = search_theta(data, gmm, W, profile=True, seed=seed)
                    x0 = expand_theta(data, x_prof, True)
                except (ProfilingError, NumericError):
                    pass
        x, fx, info = simplex_search(f, x0, gmm.simplex_step, gmm.restarts, gmm.max_iter, seed)
    if info.get("at_boundary"):
        logger.warning(f"GMM optimum at search bracket boundary: {x}")
    return x, expand_theta(data, x, profile), fx, info


def minimize_gmm(data: MomentData, gmm: Optional[GmmConfig] = None, estimator: str = "dgmm",
                 seed: int = 0) -> DgmmResult:
    gmm = gmm or GmmConfig()
    profile = can_profile(data.system, gmm.profile)
    if gmm.weighting == "optimal":
        theta0 = data.theta_prelim[0] if data.theta_prelim is not None else search_theta(data, gmm, None, profile, seed)[1]
        W = linalg.pinvh(psi_covariance(data, theta0))
    else:
        W = np.eye(data.q)

    x_hat, theta_full, fx, info = search_theta(data, gmm, W, profile, seed)
    upsilon = jacobian_fd(lambda x: psi_bar(data, expand_theta(data, x, profile)), x_hat, gmm.fd_scale)
    psi_cov = psi_covariance(data, theta_full)
    sigma = sandwich_covariance(upsilon, W, psi_cov)
    names = free_names(data.system, profile)
    pb = psi_bar(data, theta_full)
    diagnostics = {
        "weighting": gmm.weighting,
        "profile": profile,
        "q": data.q,
        "full_theta": dict(zip(data.system.param_names, map(float, theta_full))),
        "bracket": [gmm.bracket_lo, gmm.bracket_hi],
        **info,
        "at_boundary": bool(info.get("at_boundary", False)),
    }
    return DgmmResult.from_arrays(
        estimator, names, x_hat, sigma, data.n,
        objective=float(fx),
        psi_bar_norm=float(np.linalg.norm(pb)),
        derived=derived_quantities(names, x_hat, sigma, data.n),
        diagnostics=diagnostics,
    )


def plugin_data(panel: PanelDataset, system: MomentSystem, eta, include_constant: bool = False, **extra) -> MomentData:
    instruments = system.evaluate_menu(panel, plugin_instruments(system, include_constant))
    return MomentData(system=system, panel=panel, eta=eta, instruments=instruments, **extra)


def _bootstrap_draw(b, panel, folds, system, spec, pi, gmm, seed):
    rng = child_rng(seed, 1, b)
    n = panel.n_firms
    draw = rng.integers(0, n, size=n)
    fold_plan = make_folds(n, folds.n_folds, child_seed(seed, 2, b))
    sample = panel.take(draw)
    try:
        eta_b = crossfit_eta(sample, fold_plan, spec, system.eta_targets(), seed=child_seed(seed, 3, b))
        data_b = plugin_data(sample, system, eta_b.held_out, pi.include_constant)
        return search_theta(data_b, gmm, None, seed=child_seed(seed, 4, b))[0]
    except (EstimationError, ValueError) as e:
        logger.debug(f"Bootstrap draw {b} failed: {e}")
        return None


def estimate_naive_pi(panel: PanelDataset, folds: FoldPlan, eta_hat, system: MomentSystem,
                      spec: Optional[RegressorSpec] = None, pi: Optional[PiConfig] = None,
                      gmm: Optional[GmmConfig] = None, bootstrap_reps: Optional[int] = None,
                      seed: int = 0, workers: int = 1) -> DgmmResult:
    """
    Plug-in GMM with conventional lagged instruments on the structural CMRs.

    Standard errors come from a firm-level bootstrap that refits the first
    stage on every resample; the first-stage-ignoring sandwich SE is kept in
    the diagnostics.
    """
    pi = pi or PiConfig()
    gmm = (gmm or GmmConfig()).model_copy(update={"weighting": "identity"})
    spec = spec or RegressorSpec()
    B = pi.bootstrap_reps if bootstrap_reps is None else bootstrap_reps
    if pi.se_method == "bootstrap" and B < 50:
        raise ArgumentError(f"Bootstrap needs at least 50 resamples, got B={B}")

    data = plugin_data(panel, system, eta_hat.held_out, pi.include_constant)
    naive = minimize_gmm(data, gmm, estimator="pi", seed=seed)
    diagnostics = {**naive.diagnostics, "naive_se": naive.se, "se_method": pi.se_method}
    if pi.se_method == "sandwich":
        return naive.model_copy(update={"diagnostics": diagnostics})

    draws = Parallel(n_jobs=workers)(
        delayed(_bootstrap_draw)(b, panel, folds, system, spec, pi, gmm, seed) for b in range(B)
    )
    kept = [d for d in draws if d is not None]
    skipped = B - len(kept)
    if skipped > pi.max_skip_share * B:
        raise BootstrapError(f"{skipped} of {B} bootstrap resamples failed")
    if skipped:
        logger.warning(f"Skipped {skipped} of {B} bootstrap resamples")
    draws = np.vstack(kept)
    sigma = np.atleast_2d(np.cov(draws, rowvar=False)) * panel.n_firms
    diagnostics.update({"bootstrap_reps": B, "bootstrap_skipped": skipped})
    names = naive.param_names
    theta = np.asarray(naive.theta)
    return DgmmResult.from_arrays(
        "pi", names, theta, sigma, panel.n_firms,
        objective=naive.objective,
        psi_bar_norm=naive.psi_bar_norm,
        derived=derived_quantities(names, theta, sigma, panel.n_firms),
        diagnostics=diagnostics,
    )


def estimate_ols(panel: PanelDataset, system: MomentSystem) -> DgmmResult:
    """Pooled OLS of Y_t on a constant and the inputs over t >= 2, firm-clustered covariance."""
    system.validate(panel)
    n, T = panel.n_firms, panel.n_periods - 1
    X = np.concatenate([np.ones((n, T, 1)), system.inputs_array(panel)[:, 1:, :]], axis=-1)
    y = panel.variables["Y"][:, 1:]
    Xf, yf = X.reshape(n * T, -1), y.reshape(-1)
    try:
        XtX_inv = linalg.inv(Xf.T @ Xf)
    except linalg.LinAlgError as e:
        raise NumericError("Singular OLS design") from e
    beta = XtX_inv @ Xf.T @ yf
    u = y - X @ beta
    scores = np.einsum("ntk,nt->nk", X, u)
    cov = XtX_inv @ (scores.T @ scores) @ XtX_inv
    names = ["theta_1", *system.input_names]
    sigma = cov * n
    return DgmmResult.from_arrays(
        "ols", names, beta, sigma, n,
        derived=derived_quantities(names, beta, sigma, n),
        diagnostics={"observations": n * T},
    )


def directional_derivative(data: MomentData, theta, direction, tau: float) -> np.ndarray:
    """(psi_bar(eta + tau*b) - psi_bar(eta)) / tau for a first-stage direction b of shape (n, T-1)."""
    shifted = replace(data, eta=data.eta + tau * np.asarray(direction, dtype=float))
    return (psi_bar(shifted, theta) - psi_bar(data, theta)) / tau
