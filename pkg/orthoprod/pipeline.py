import logging

from orthoprod.config import RunConfig
from orthoprod.data import PanelDataset, make_folds
from orthoprod.dgmm import MomentData, estimate_naive_pi, estimate_ols, minimize_gmm
from orthoprod.errors import ArgumentError
from orthoprod.firststage import crossfit_eta
from orthoprod.moments import build_system
from orthoprod.oriv import estimate_orivs
from orthoprod.utils import child_seed

logger = logging.getLogger(__name__)

ESTIMATOR_SETS = {
    'dgmm': ('dgmm',),
    'pi': ('pi',),
    'ols': ('ols',),
    'both': ('pi', 'dgmm'),
    'all': ('ols', 'pi', 'dgmm'),
}


def resolve_estimators(choice):
    if isinstance(choice, str):
        if choice not in ESTIMATOR_SETS:
            raise ArgumentError(f"Unknown estimator set {choice!r}; expected one of {sorted(ESTIMATOR_SETS)}")
        return ESTIMATOR_SETS[choice]
    return tuple(choice)


def estimate_panel(
    panel: PanelDataset,
    config: RunConfig = None,
    estimators='both',
    seed=None,
    workers=None,
    debug_path=None,
    progress_callback=None,
):
    """
    Orchestrate folds, cross-fitted first stages, OR-IVs and the requested
    estimators on one panel.
    Returns a dict with status, per-estimator results and the fitted OR-IVs.
    """
    config = config or RunConfig()
    estimators = resolve_estimators(estimators)
    seed = config.seed if seed is None else seed
    workers = config.workers if workers is None else workers
    spec = config.effective_first_stage()

    def progress(message):
        logger.info(message)
        if progress_callback:
            progress_callback(message)

    # 1. Moment system and folds
    system = build_system(config.model, panel.n_periods)
    system.validate(panel)
    results = {}
    if 'ols' in estimators:
        results['ols'] = estimate_ols(panel, system)
    if not {'pi', 'dgmm'} & set(estimators):
        return {'status': 'ok', 'results': results, 'orivs': None}
    folds = make_folds(panel.n_firms, config.folds, child_seed(seed, 0))

    # 2. Cross-fitted first stage
    progress(f"Fitting {spec.kind} first stage on {panel.n_firms} firms, {folds.n_folds} folds")
    eta = crossfit_eta(panel, folds, spec, system.eta_targets(), seed=child_seed(seed, 1), workers=workers)

    # 3. Naive plug-in benchmark
    if 'pi' in estimators:
        progress("Estimating plug-in benchmark")
        results['pi'] = estimate_naive_pi(
            panel, folds, eta, system, spec=spec, pi=config.pi, gmm=config.gmm,
            seed=child_seed(seed, 2), workers=workers,
        )

    # 4. OR-IVs and debiased GMM
    orivs = None
    if 'dgmm' in estimators:
        progress("Building orthogonal instruments")
        orivs = estimate_orivs(
            panel, folds, eta, system, solver=config.solver, gmm=config.gmm, spec=spec,
            seed=child_seed(seed, 3), workers=workers, debug_path=debug_path,
        )
        data = MomentData(
            system=system, panel=panel, eta=eta.held_out, instruments=orivs.cross_fitted(),
            folds=folds, theta_prelim=orivs.theta_prelim,
        )
        progress("Minimizing debiased GMM objective")
        results['dgmm'] = minimize_gmm(data, config.gmm, estimator='dgmm', seed=child_seed(seed, 4))

    stages = eta.stage_counts()
    if stages:
        for name in ('pi', 'dgmm'):
            if name in results:
                results[name].diagnostics['first_stage_stages'] = stages

    return {'status': 'ok', 'results': results, 'orivs': orivs}
