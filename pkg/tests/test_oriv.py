import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from orthoprod.config import RegressorSpec, SolverConfig
from orthoprod.data import make_folds
from orthoprod.errors import ArgumentError, DesignError, InitializationError
from orthoprod.firststage import crossfit_eta
from orthoprod.moments import capital_only_menu
from orthoprod.oriv import (
    build_design_general,
    build_design_production,
    coordinate_descent,
    estimate_orivs,
    fold_dictionaries,
    init_beta_lowdim,
    kkt_violation,
    lambda_rule,
    production_factors,
    soft_threshold,
    solve_weighted_lasso,
    three_way_split,
    update_loadings,
)
from orthoprod.oriv.estimate import low_indices

RIDGE = RegressorSpec(kind='ridge_basis')


def check_random_instances(count, seed):
    """KKT bounds and a non-increasing objective on random designs with r <= 50, J <= 4."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        J, r = int(rng.integers(1, 5)), int(rng.integers(2, 51))
        M = rng.standard_normal((J, 200, r))
        f = rng.standard_normal((J, 200)) + M[:, :, 0]
        loadings = rng.uniform(0.5, 1.5, r)
        lam = rng.uniform(0.01, 0.3)
        solution = coordinate_descent(M, f, np.zeros(r), loadings, lam)
        assert kkt_violation(M, f, solution.beta, loadings, lam) <= 1e-8
        history = solution.history
        assert np.all(np.diff(history) <= 1e-10 * (1.0 + np.abs(history[:-1])))


class TestPenaltyLevel:
    def test_reference_value(self):
        c2 = 0.5 / math.log(800)
        lam = lambda_rule(800, 40, 1.1, c2)
        assert lam == pytest.approx(1.1 / 800 ** 0.25 * norm.ppf(1 - c2 / 80), rel=1e-12)
        assert lam == pytest.approx(0.6433, abs=2e-3)

    def test_median_quantile_gives_zero(self):
        assert lambda_rule(500, 10, 1.1, 10.0) == pytest.approx(0.0, abs=1e-12)

    def test_linear_in_c1(self):
        assert lambda_rule(500, 25, 2.2, 0.1) == pytest.approx(2 * lambda_rule(500, 25, 1.1, 0.1))

    def test_default_c2(self):
        assert lambda_rule(800, 40) == pytest.approx(lambda_rule(800, 40, 1.1, 0.5 / math.log(800)))

    @pytest.mark.parametrize('n,r,c2', [(1, 10, 0.1), (100, 0, 0.1), (100, 2, 4.0), (100, 2, -1.0)])
    def test_errors(self, n, r, c2):
        with pytest.raises(ArgumentError):
            lambda_rule(n, r, 1.1, c2)


class TestCoordinateDescent:
    def test_soft_threshold(self):
        np.testing.assert_allclose(soft_threshold(np.array([2.0, -3.0, 0.5]), 1.0), [1.0, -2.0, 0.0])

    @pytest.mark.parametrize('m,f,expected', [
        (np.ones(4), np.full(4, 2.0), 1.0),
        (np.full(4, math.sqrt(2.0)), np.full(4, -3.0 / math.sqrt(2.0)), -1.0),
        (np.ones(4), np.array([1.0, -1.0, 1.0, -1.0]), 0.0),
    ])
    def test_single_coordinate(self, m, f, expected):
        solution = coordinate_descent(m[None, :, None], f[None], np.zeros(1), np.ones(1), 1.0)
        assert solution.beta[0] == pytest.approx(expected, abs=1e-12)

    def test_zero_diagonal_coordinate_is_skipped(self):
        M = np.zeros((1, 5, 2))
        M[0, :, 0] = 1.0
        solution = coordinate_descent(M, np.full((1, 5), 3.0), np.array([0.0, 0.7]), np.ones(2), 0.5)
        assert solution.beta[0] == pytest.approx(2.5)
        assert solution.beta[1] == 0.7

    def test_optimality_on_random_instances(self):
        check_random_instances(200, seed=2024)

    @pytest.mark.slow
    def test_optimality_on_a_thousand_random_instances(self):
        check_random_instances(1000, seed=2025)

    def test_warm_start_converges_to_same_point(self, lasso_instance):
        M, f = lasso_instance(seed=3, r=15)
        loadings = np.ones(15)
        cold = coordinate_descent(M, f, np.zeros(15), loadings, 0.05)
        warm = coordinate_descent(M, f, np.full(15, 0.3), loadings, 0.05)
        np.testing.assert_allclose(warm.beta, cold.beta, atol=1e-6)


class TestInitialization:
    def test_matches_pooled_least_squares(self, lasso_instance):
        M, f = lasso_instance(seed=4, J=3, N=80, r=8)
        beta = init_beta_lowdim(M, f, [0, 1, 2])
        stacked = M[:, :, :3].reshape(-1, 3)
        expected = np.linalg.lstsq(stacked, f.reshape(-1), rcond=None)[0]
        np.testing.assert_allclose(beta[:3], expected, atol=1e-8)
        np.testing.assert_array_equal(beta[3:], 0.0)

    def test_exact_target(self, lasso_instance):
        M, _ = lasso_instance(seed=5, r=6)
        beta = init_beta_lowdim(M, M[:, :, 0], range(3))
        np.testing.assert_allclose(beta, [1.0, 0, 0, 0, 0, 0], atol=1e-8)

    def test_empty_low_set(self, lasso_instance):
        M, f = lasso_instance(r=4)
        np.testing.assert_array_equal(init_beta_lowdim(M, f, []), np.zeros(4))

    def test_singular_low_columns(self, lasso_instance):
        M, f = lasso_instance(r=4)
        M[:, :, :2] = 0.0
        with pytest.raises(InitializationError):
            init_beta_lowdim(M, f, [0, 1])

    def test_shape_mismatch(self, lasso_instance):
        M, f = lasso_instance(r=4)
        with pytest.raises(ArgumentError):
            init_beta_lowdim(M, f[:, :10], [0])

    @pytest.mark.parametrize('r,low_dim,expected', [(9, None, 5), (3, None, 3), (125, 0, 0), (60, 2, 2)])
    def test_low_indices(self, capital_system, r, low_dim, expected):
        assert low_indices(capital_system, r, low_dim) == list(range(expected))

    def test_low_indices_fallback(self, two_input_system):
        assert low_indices(two_input_system, 125) == list(range(8))


class TestLoadings:
    def test_floor_for_exact_fit(self, lasso_instance):
        M, _ = lasso_instance(r=3)
        beta = np.array([1.0, -2.0, 0.5])
        f = np.einsum('jnk,k->jn', M, beta)
        np.testing.assert_allclose(update_loadings(M, f, beta, floor=1e-12), 1e-12)

    def test_closed_form(self):
        m = np.array([1.0, 2.0, -1.0, 0.5])
        f = np.array([2.0, 1.0, 1.0, -4.0])
        D = update_loadings(m[None, :, None], f[None], np.zeros(1))
        assert D[0] == pytest.approx(math.sqrt(np.mean((m * f) ** 2)))

    def test_scale_with_residual(self, lasso_instance):
        M, f = lasso_instance(r=5)
        beta = np.zeros(5)
        np.testing.assert_allclose(update_loadings(M, 2 * f, beta), 2 * update_loadings(M, f, beta))


class TestWeightedLasso:
    def test_orthogonal_target_is_unchanged(self, lasso_instance):
        M, p = lasso_instance(seed=6, J=3, N=150, r=12)
        coef = np.linalg.lstsq(M.reshape(-1, 12), p.reshape(-1), rcond=None)[0]
        f = p - np.einsum('jnk,k->jn', M, coef)
        solution = solve_weighted_lasso(M, f, 0.1, range(3))
        kappa = f - np.einsum('jnk,k->jn', M, solution.beta)
        assert np.max(np.abs(kappa - f)) <= 1e-6

    def test_full_shrinkage(self, lasso_instance):
        M, f = lasso_instance(seed=7)
        solution = solve_weighted_lasso(M, f, 1e6, [])
        np.testing.assert_array_equal(solution.beta, 0.0)
        assert len(solution.active) == 0

    def test_recovers_sparse_signal(self):
        rng = np.random.default_rng(8)
        M = rng.standard_normal((2, 2000, 30))
        beta0 = np.zeros(30)
        beta0[[0, 4]] = [1.0, -0.5]
        f = np.einsum('jnk,k->jn', M, beta0) + 0.1 * rng.standard_normal((2, 2000))
        lam = lambda_rule(2000, 30)
        solution = solve_weighted_lasso(M, f, lam, range(2))
        assert set(solution.active) == {0, 4}
        assert solution.iterations >= 1
        np.testing.assert_allclose(solution.beta[[0, 4]], [1.0, -0.5], atol=0.08)
        assert kkt_violation(M, f, solution.beta, solution.loadings, lam) <= 1e-8

    def test_accepts_single_equation(self, lasso_instance):
        M, f = lasso_instance(J=1, r=4)
        solution = solve_weighted_lasso(M[0], f[0], 0.05, [0])
        assert solution.beta.shape == (4,)


@pytest.fixture(scope='module')
def design_inputs(sim_panel, capital_system):
    rows = np.arange(sim_panel.n_firms)
    dictionaries = fold_dictionaries(sim_panel, rows, capital_system, K=3)
    return sim_panel, rows, capital_system, dictionaries


class TestProductionDesign:
    def test_factors(self, capital_system):
        np.testing.assert_allclose(production_factors(capital_system, 0.5), [1.5, 0.75, 1.5, 0.75])

    def test_theta_omega_zero(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        design = build_design_production(panel, rows, system, dictionaries, 0.0)
        assert design.matrices.shape == (4, panel.n_firms, 9)
        np.testing.assert_array_equal(design.matrices[[1, 3]], 0.0)
        gamma = dictionaries[0].apply(system.conditioning_values(panel, 0))
        np.testing.assert_allclose(design.matrices[0], gamma)

    def test_theta_omega_one(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        design = build_design_production(panel, rows, system, dictionaries, 1.0)
        gamma = dictionaries[1].apply(system.conditioning_values(panel, 2))
        np.testing.assert_allclose(design.matrices[2], 2 * gamma)
        np.testing.assert_allclose(design.matrices[3], 2 * gamma)

    def test_evaluate_matches_training_matrices(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        design = build_design_production(panel, rows[:100], system, dictionaries, 0.7)
        np.testing.assert_allclose(design.evaluate(panel)[:, :100], design.matrices)
        assert design.J == 4 and design.r == 9

    def test_errors(self, design_inputs, sim_panel, capital_system):
        panel, rows, system, dictionaries = design_inputs
        with pytest.raises(DesignError):
            build_design_production(panel, rows, system, dictionaries, float('nan'))
        with pytest.raises(DesignError):
            build_design_production(panel, rows, system, dictionaries[:1], 0.7)
        mixed = (dictionaries[0], fold_dictionaries(sim_panel, rows, capital_system, K=2)[1])
        with pytest.raises(DesignError):
            build_design_production(panel, rows, system, mixed, 0.7)


class TestGeneralDesign:
    def test_reproduces_production_design(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        theta = np.array([0.0, 1.0, 0.7])
        spec = RegressorSpec(kind='ridge_basis', hyperparameters={'ridge': 1e-3})
        general = build_design_general(panel, rows, system, dictionaries, theta, theta, spec=spec, seed=3)
        production = build_design_production(panel, rows, system, dictionaries, 0.7)
        assert general.matrices.shape == production.matrices.shape
        error = np.linalg.norm(general.matrices - production.matrices) / np.linalg.norm(production.matrices)
        assert error < 0.3

    def test_zero_derivative_gives_zero_design(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs

        def nu(theta, panel, part):
            return np.zeros((len(part), system.J, system.n_eta))

        design = build_design_general(panel, rows, system, dictionaries, [0, 1, 0.7], [0, 1, 0.7], nu=nu)
        np.testing.assert_array_equal(design.matrices, 0.0)

    def test_unshared_coefficients_widen_the_design(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        design = build_design_general(panel, rows, system, dictionaries, [0, 1, 0.7], [0, 1, 0.7],
                                      shared_beta=False, seed=1)
        assert design.r == system.J * 9

    def test_split(self):
        parts = three_way_split(np.arange(10, 40), seed=2)
        assert [len(p) for p in parts] == [10, 10, 10]
        assert sorted(np.concatenate(parts)) == list(range(10, 40))
        with pytest.raises(DesignError):
            three_way_split(np.arange(2))

    def test_empty_part(self, design_inputs):
        panel, rows, system, dictionaries = design_inputs
        split = (rows[:10], np.array([], dtype=int), rows[10:])
        with pytest.raises(DesignError):
            build_design_general(panel, rows, system, dictionaries, [0, 1, 0.7], [0, 1, 0.7], split=split)


@pytest.fixture(scope='module')
def fitted_orivs(sim_panel, capital_system, tmp_path_factory):
    folds = make_folds(sim_panel.n_firms, 5, seed=1)
    eta = crossfit_eta(sim_panel, folds, RIDGE, capital_system.eta_targets(), seed=2)
    path = tmp_path_factory.mktemp('orivs') / 'lasso.jsonl'
    orivs = estimate_orivs(sim_panel, folds, eta, capital_system, spec=RIDGE, seed=3, debug_path=path)
    return orivs, folds, path


class TestEstimateOrivs:
    def test_shapes(self, fitted_orivs, sim_panel):
        orivs, folds, _ = fitted_orivs
        assert orivs.q == 4
        assert orivs.theta_prelim.shape == (5, 3)
        kappa = orivs.cross_fitted()
        assert kappa.shape == (4, sim_panel.n_firms, 4)
        assert np.all(np.isfinite(kappa))
        rows = folds.held_out(2)
        np.testing.assert_array_equal(kappa[:, rows], orivs.kappa(2)[:, rows])

    def test_residual_reconstruction(self, fitted_orivs, sim_panel, capital_system):
        orivs, _, _ = fitted_orivs
        fit = orivs.fits[0]
        instruments = capital_system.evaluate_menu(sim_panel, capital_only_menu())
        design_all = fit.design.evaluate(sim_panel)
        for q in range(4):
            expected = instruments[q] - np.einsum('jnk,k->nj', design_all, fit.solutions[q].beta)
            np.testing.assert_allclose(fit.kappa[q], expected, atol=1e-12)

    def test_training_optimality(self, fitted_orivs, sim_panel, capital_system):
        orivs, folds, _ = fitted_orivs
        instruments = capital_system.evaluate_menu(sim_panel, capital_only_menu())
        for fit in orivs.fits:
            train = folds.training(fit.fold)
            for q, solution in enumerate(fit.solutions):
                targets = instruments[q][train].T
                assert kkt_violation(fit.design.matrices, targets, solution.beta, solution.loadings, fit.lam) <= 1e-6

    def test_residualized_instruments_come_back_unchanged(self, fitted_orivs, sim_panel, capital_system):
        orivs, folds, _ = fitted_orivs
        fit = orivs.fits[0]
        train = folds.training(0)
        M = fit.design.matrices
        _, n_train, r = M.shape
        low = low_indices(capital_system, r)
        instruments = capital_system.evaluate_menu(sim_panel, capital_only_menu())
        for q in range(orivs.q):
            f = instruments[q][train].T
            coef = np.linalg.lstsq(M.reshape(-1, r), f.reshape(-1), rcond=None)[0]
            kappa = f - np.einsum('jnk,k->jn', M, coef)
            for c1 in (1e-8, fit.c1):
                lam = lambda_rule(n_train, r, c1, fit.c2)
                solution = solve_weighted_lasso(M, kappa, lam, low)
                again = kappa - np.einsum('jnk,k->jn', M, solution.beta)
                assert np.max(np.abs(again - kappa)) <= 1e-6

    def test_penalty_record(self, fitted_orivs, sim_panel):
        orivs, folds, _ = fitted_orivs
        fit = orivs.fits[1]
        n_train = len(folds.training(1))
        assert fit.c2 == pytest.approx(0.5 / math.log(max(sim_panel.n_firms, fit.design.r)))
        assert fit.lam == pytest.approx(lambda_rule(n_train, fit.design.r, 1.1, fit.c2))
        assert fit.betas.shape == (4, fit.design.r)
        assert len(fit.penalties) == 4

    def test_debug_dump(self, fitted_orivs):
        _, _, path = fitted_orivs
        lines = path.read_text().splitlines()
        assert len(lines) == 20
        record = json.loads(lines[0])
        assert {'fold', 'instrument', 'lambda', 'beta', 'active', 'loadings'} <= set(record)

    def test_empty_menu(self, sim_panel, capital_system):
        folds = make_folds(sim_panel.n_firms, 5)
        with pytest.raises(ArgumentError):
            estimate_orivs(sim_panel, folds, None, capital_system, menu=[])

    def test_general_design_path(self, sim_panel, capital_system):
        folds = make_folds(sim_panel.n_firms, 5, seed=1)
        eta = crossfit_eta(sim_panel, folds, RIDGE, capital_system.eta_targets(), seed=2)
        orivs = estimate_orivs(sim_panel, folds, eta, capital_system, solver=SolverConfig(design='general'),
                               spec=RIDGE, seed=3)
        assert all(fit.design.kind == 'general' for fit in orivs.fits)
        assert np.all(np.isfinite(orivs.cross_fitted()))
