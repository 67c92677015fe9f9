"""
Simulation studies.

``simulate_dgp`` draws firm panels from the capital-only production model
with an ad-hoc investment policy; ``run_experiment`` replicates the PI
versus DGMM comparison; ``lasso_oracle_check`` measures the multi-equation
Lasso on a sparse design with generated regressors; ``histogram_export``
bins standardized estimates for plotting elsewhere.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from orthoprod.config import DgpConfig, LassoCheckConfig, RunConfig, SolverConfig
from orthoprod.data import PanelDataset
from orthoprod.errors import ArgumentError, EstimationError, ExperimentError, ExportError
from orthoprod.models import EstimatorSummary, LassoCheckRow, McReport, RepRecord
from orthoprod.oriv.lasso import lambda_rule, solve_weighted_lasso
from orthoprod.pipeline import estimate_panel, resolve_estimators
from orthoprod.utils import child_rng, child_seed

logger = logging.getLogger(__name__)

MAX_RESIM_ATTEMPTS = 20
TRUE_SUPPORT = (0, 1, 2)


def investment_policy(config: DgpConfig, K, omega, shock=0.0):
    """Log investment as a function of log capital and productivity."""
    return (config.gamma_0 + config.gamma_1 * K + config.gamma_2 * omega
            + np.exp(-0.5 * K + 0.5 * omega) + shock)


def _simulate_firms(config: DgpConfig, n: int, rng: np.random.Generator):
    T = config.burn_in
    rho = config.theta_omega
    innovation_sd = config.sigma_omega * math.sqrt(1.0 - rho ** 2)
    omega = np.empty((n, T))
    K = np.empty((n, T))
    I = np.empty((n, T))
    omega[:, 0] = rng.normal(0.0, config.sigma_omega, n)
    capital = np.full(n, config.k0)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(T):
            if t > 0:
                omega[:, t] = rho * omega[:, t - 1] + rng.normal(0.0, innovation_sd, n)
                mu = np.exp(rng.normal(config.mu_log_mean, config.mu_log_sd, n))
                capital = config.one_minus_delta * capital + mu * np.exp(I[:, t - 1])
            K[:, t] = np.log(capital)
            shock = config.invest_shock_sd * rng.standard_normal(n)
            I[:, t] = investment_policy(config, K[:, t], omega[:, t], shock)
    kept = slice(T - config.keep_periods, T)
    omega, K, I = omega[:, kept], K[:, kept], I[:, kept]
    eps = rng.normal(0.0, config.eps_sd, (n, config.keep_periods))
    Y = config.theta_1 + config.theta_k * K + omega + eps
    return {"Y": Y, "K": K, "I": I}, {"omega": omega, "eps": eps}


def simulate_dgp(config: Optional[DgpConfig] = None, n: int = 1000, seed: int = 0) -> PanelDataset:
    """
    Simulate ``n`` firms for ``burn_in`` periods from k0 and stationary omega
    and keep the last ``keep_periods``. Firms whose levels overflow are
    redrawn from a fresh sub-stream.
    """
    config = config or DgpConfig()
    if n < 1:
        raise ArgumentError(f"Need at least one firm, got n={n}")
    observed, latent = _simulate_firms(config, n, child_rng(seed, 0))

    def finite_rows(block):
        return np.all([np.all(np.isfinite(v), axis=1) for v in block.values()], axis=0)

    bad = np.flatnonzero(~finite_rows(observed))
    resimulated = len(bad)
    attempt = 0
    while len(bad):
        attempt += 1
        if attempt > MAX_RESIM_ATTEMPTS:
            raise ExperimentError(f"{len(bad)} firms still overflow after {MAX_RESIM_ATTEMPTS} redraws")
        redo_obs, redo_lat = _simulate_firms(config, len(bad), child_rng(seed, 1, attempt))
        ok = finite_rows(redo_obs)
        for block, redo in ((observed, redo_obs), (latent, redo_lat)):
            for name in block:
                block[name][bad[ok]] = redo[name][ok]
        bad = bad[~ok]
    if resimulated:
        logger.warning(f"Resimulated {resimulated} of {n} firms after overflow")
        if resimulated > config.max_resim_share * n:
            raise ExperimentError(f"{resimulated} of {n} firms overflowed; the DGP is unstable at these parameters")
    return PanelDataset(variables=observed, latent=latent)


def _run_rep(rep, rep_seed, config: RunConfig, dgp: DgpConfig, n, estimators):
    try:
        panel = simulate_dgp(dgp, n, child_seed(rep_seed, 0))
        outcome = estimate_panel(panel, config, estimators, seed=child_seed(rep_seed, 1), workers=1)
    except EstimationError as e:
        logger.warning(f"Replication {rep} failed: {e}")
        return RepRecord(rep=rep, seed=rep_seed, error=str(e))
    record = RepRecord(rep=rep, seed=rep_seed)
    for name, result in outcome["results"].items():
        record.estimates[name] = result.get("theta_k")
        record.ses[name] = result.se_of("theta_k")
        record.covered[name] = result.covers("theta_k", dgp.theta_k)
        record.at_boundary[name] = bool(result.diagnostics.get("at_boundary", False))
        naive = result.diagnostics.get("naive_se")
        if naive is not None:
            record.naive_se[name] = naive[result.param_names.index("theta_k")]
    return record


def summarize(records: Sequence[RepRecord], name: str, truth: float) -> Optional[EstimatorSummary]:
    """Bias, mean SE, RMSE, sd and coverage over the successful reps of one estimator."""
    done = [r for r in records if r.error is None and name in r.estimates]
    if not done:
        return None
    errors = np.array([r.estimates[name] for r in done]) - truth
    coverage = float(np.mean([r.covered[name] for r in done]))
    return EstimatorSummary(
        bias=float(errors.mean()),
        mean_se=float(np.mean([r.ses[name] for r in done])),
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        coverage=coverage,
        coverage_mcse=float(math.sqrt(coverage * (1.0 - coverage) / len(done))),
        sd=float(errors.std()),
        successes=len(done),
        boundary_share=float(np.mean([r.at_boundary.get(name, False) for r in done])),
    )


def run_experiment(config: Optional[RunConfig] = None, n: Optional[int] = None, reps: Optional[int] = None,
                   estimators="both", seed: Optional[int] = None, workers: Optional[int] = None,
                   dgp: Optional[int] = None) -> McReport:
    """Replicate simulate + estimate ``reps`` times for one (DGP, n) cell."""
    config = config or RunConfig()
    n = config.n_firms if n is None else n
    reps = config.effective_reps() if reps is None else reps
    seed = config.seed if seed is None else seed
    workers = config.workers if workers is None else workers
    if reps < 1:
        raise ArgumentError(f"Need at least one replication, got reps={reps}")
    estimators = resolve_estimators(estimators)
    dgp_config = config.dgp
    if dgp is not None:
        dgp_config = DgpConfig.preset(dgp, **config.dgp.model_dump(exclude={"invest_shock_sd"}))

    rep_seeds = [child_seed(seed, dgp or 0, n, rep) for rep in range(reps)]
    records = Parallel(n_jobs=workers)(
        delayed(_run_rep)(rep, rep_seeds[rep], config, dgp_config, n, estimators) for rep in range(reps)
    )
    failed = sum(r.error is not None for r in records)
    if failed > config.montecarlo.max_failure_share * reps:
        raise ExperimentError(f"{failed} of {reps} replications failed (DGP {dgp}, n={n})")

    summaries = {}
    for name in estimators:
        summary = summarize(records, name, dgp_config.theta_k)
        if summary is not None:
            summaries[name] = summary
    logger.info(f"DGP {dgp}, n={n}: {reps - failed} of {reps} replications done")
    return McReport(
        dgp=dgp,
        n=n,
        reps=reps,
        truth=dgp_config.theta_k,
        summaries=summaries,
        records=list(records),
        failed=failed,
        config=config.model_dump(),
    )


def run_table(config: RunConfig, estimators="both"):
    """One McReport per (DGP, n) cell of the configured grid, DGP-major."""
    return [
        run_experiment(config, n=n, estimators=estimators, dgp=d)
        for d in config.montecarlo.dgp
        for n in config.montecarlo.n_grid
    ]


def _lasso_rep(n, rep, seed, check: LassoCheckConfig, solver: SolverConfig):
    rng = child_rng(seed, n, rep)
    beta0 = np.zeros(check.dim)
    beta0[list(TRUE_SUPPORT)] = 1.0
    X = rng.standard_normal((check.equations, n, check.dim))
    Y = X @ beta0 + check.noise_sd * rng.standard_normal((check.equations, n))
    M = X + n ** check.perturbation_exponent
    lam = lambda_rule(n, check.dim, solver.c1, check.c2_scale / math.log(max(n, check.dim)))
    low = range(min(solver.low_dim if solver.low_dim is not None else 5, check.dim))
    solution = solve_weighted_lasso(M, Y, lam, low, solver)
    mse = float(np.sum((solution.beta - beta0) ** 2))
    return mse, tuple(solution.active) == TRUE_SUPPORT, lam


def lasso_oracle_check(n: int, reps: int = 200, seed: int = 0, check: Optional[LassoCheckConfig] = None,
                       solver: Optional[SolverConfig] = None, workers: int = 1) -> LassoCheckRow:
    """
    Sparse two-equation design sharing beta0 = (1, 1, 1, 0, ...): the solver
    sees the generated regressors X + n^exponent while Y is built from X.
    Reports the mean of ||beta_hat - beta0||^2 and the share of reps whose
    active set is exactly the true support.
    """
    check = check or LassoCheckConfig()
    solver = solver or SolverConfig()
    if n < 100:
        raise ArgumentError(f"The oracle study needs n >= 100, got {n}")
    outcomes = Parallel(n_jobs=workers)(
        delayed(_lasso_rep)(n, rep, seed, check, solver) for rep in range(reps)
    )
    mses, hits, lams = zip(*outcomes)
    row = LassoCheckRow(n=n, reps=reps, mse=float(np.mean(mses)), selection_rate=float(np.mean(hits)),
                        lam=float(lams[0]))
    logger.info(f"Lasso oracle n={n}: MSE={row.mse:.4f}, selection={row.selection_rate:.2%}")
    return row


def standardize(estimates, truth: float) -> np.ndarray:
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size == 0:
        raise ExportError("No estimates to standardize")
    sd = estimates.std()
    if not sd > 0.0:
        raise ExportError("Estimates have zero spread; standardized values are undefined")
    return (estimates - truth) / sd


def histogram_export(estimates, truth: float, bins: int = 20, path=None) -> pd.DataFrame:
    """Counts of (theta_hat - theta_0) / sd over equal-width bins; optionally written as CSV."""
    z = standardize(estimates, truth)
    counts, edges = np.histogram(z, bins=bins)
    frame = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
    if path is not None:
        frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return frame


def report_histograms(report: McReport, bins: int = 20) -> pd.DataFrame:
    """Histogram rows for every estimator of a report, with a leading estimator column."""
    frames = []
    for name in report.summaries:
        values = [r.estimates[name] for r in report.records if r.error is None and name in r.estimates]
        frame = histogram_export(values, report.truth, bins)
        frame.insert(0, "estimator", name)
        frame.insert(0, "n", report.n)
        frame.insert(0, "dgp", report.dgp)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
