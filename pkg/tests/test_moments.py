import numpy as np
import pytest

from orthoprod.errors import SystemSpecError
from orthoprod.moments import (
    InstrumentTerm,
    build_system,
    capital_only_menu,
    cobb_douglas_two_input_system,
    default_menu,
    plugin_instruments,
    two_input_menu,
)


class TestCapitalOnlySystem:
    def test_cmr_layout(self, capital_system):
        assert capital_system.J == 4
        assert capital_system.n_eta == 2
        assert capital_system.param_names == ('theta_1', 'theta_k', 'theta_omega')
        roles = [(c.role, c.period, c.eta) for c in capital_system.cmrs]
        assert roles == [('first_stage', 1, 0), ('structural', 2, 0), ('first_stage', 2, 1), ('structural', 3, 1)]
        assert capital_system.cmrs[1].conditioning == (('I', 1), ('K', 1))
        assert [t.name for t in capital_system.eta_targets()] == ['eta1', 'eta2']

    def test_residuals_vanish_at_truth(self, linear_panel, capital_system):
        panel = linear_panel(n=50, theta=(0.5, 0.8, 0.6))
        eta = panel.variables['Y'][:, :2]
        m = capital_system.residuals(panel, [0.5, 0.8, 0.6], eta)
        assert m.shape == (50, 4)
        np.testing.assert_allclose(m, 0.0, atol=1e-12)

    def test_residual_formulas(self, linear_panel, capital_system):
        panel = linear_panel(n=20, seed=3, xi_sd=0.5)
        Y, K = panel.variables['Y'], panel.variables['K']
        eta = np.random.default_rng(0).normal(size=(20, 2))
        theta_1, theta_k, theta_omega = 0.2, 1.1, 0.4
        m = capital_system.residuals(panel, [theta_1, theta_k, theta_omega], eta)
        np.testing.assert_allclose(m[:, 0], Y[:, 0] - eta[:, 0])
        np.testing.assert_allclose(
            m[:, 3],
            Y[:, 2] - theta_1 - theta_k * K[:, 2] - theta_omega * (eta[:, 1] - theta_1 - theta_k * K[:, 1]),
        )

    def test_nu_tilde(self, capital_system):
        nu = capital_system.nu_tilde([0.0, 1.0, 0.7])
        np.testing.assert_allclose(nu, [[-1.0, 0.0], [-0.7, 0.0], [0.0, -1.0], [0.0, -0.7]])

    def test_residuals_are_affine_in_eta(self, linear_panel, capital_system):
        panel = linear_panel(n=30, seed=1)
        theta = [0.1, 0.9, 0.5]
        rng = np.random.default_rng(2)
        eta, b = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
        m0 = capital_system.residuals(panel, theta, eta)
        m1 = capital_system.residuals(panel, theta, eta + b)
        nu = capital_system.nu_tilde(theta)
        np.testing.assert_allclose(m1 - m0, b @ nu.T, atol=1e-12)

    def test_validate(self, linear_panel, capital_system):
        capital_system.validate(linear_panel(n=5))
        with pytest.raises(SystemSpecError):
            capital_system.validate(linear_panel(n=5, inputs=('L',)))
        with pytest.raises(SystemSpecError):
            capital_system.validate(linear_panel(n=5, T=4))


class TestTwoInputSystem:
    @pytest.mark.parametrize('T', [3, 4, 6])
    def test_sizes(self, T):
        system = cobb_douglas_two_input_system(T)
        assert system.J == 2 * (T - 1)
        assert system.param_names == ('theta_1', 'theta_l', 'theta_k', 'theta_omega')
        assert len(system.eta_targets()) == T - 1
        assert system.eta_targets()[0].conditioning == (('E', 1), ('L', 1), ('K', 1))

    def test_residuals_vanish_at_truth(self, linear_panel):
        theta = (0.3, 0.6, 0.35, 0.5)
        panel = linear_panel(n=40, theta=theta, inputs=('L', 'K'), proxy='E', T=4)
        system = build_system('cobb_douglas_two_input', 4)
        m = system.residuals(panel, theta, panel.variables['Y'][:, :3])
        np.testing.assert_allclose(m, 0.0, atol=1e-12)

    def test_build_system_errors(self):
        with pytest.raises(SystemSpecError):
            build_system('capital_only', 4)
        with pytest.raises(SystemSpecError):
            build_system('translog')
        with pytest.raises(SystemSpecError):
            cobb_douglas_two_input_system(1)


class TestInstruments:
    def test_terms(self, linear_panel):
        panel = linear_panel(n=6)
        np.testing.assert_allclose(InstrumentTerm('K', 2, 2).evaluate(panel), panel.column('K', 2) ** 2)
        np.testing.assert_allclose(InstrumentTerm('Y', 1, 0).evaluate(panel), 1.0)
        assert str(InstrumentTerm('K', 1)) == 'K1'
        assert str(InstrumentTerm('I', 2, 2)) == 'I2^2'

    def test_capital_only_menu(self, linear_panel, capital_system):
        menu = capital_only_menu()
        assert len(menu) == 4
        assert [str(t) for t in menu[3]] == ['K1', 'I1', 'I2', 'I2']
        panel = linear_panel(n=8)
        values = capital_system.evaluate_menu(panel, menu)
        assert values.shape == (4, 8, 4)
        np.testing.assert_allclose(values[1, :, 2], panel.column('I', 2))

    def test_two_input_menu(self):
        menu = two_input_menu(3)
        assert len(menu) == 5
        assert [str(t) for t in menu[4]] == ['K1^4', 'K2^4', 'K2^4', 'K3^4']
        assert default_menu(cobb_douglas_two_input_system(3)) == menu

    def test_plugin_instruments(self, linear_panel, capital_system):
        menu = plugin_instruments(capital_system)
        assert len(menu) == 8
        # every conventional instrument sits on exactly one structural CMR
        for instrument in menu:
            used = [j for j, term in enumerate(instrument) if term is not None]
            assert len(used) == 1
            assert capital_system.cmrs[used[0]].role == 'structural'
        assert len(plugin_instruments(capital_system, include_constant=True)) == 10
        values = capital_system.evaluate_menu(linear_panel(n=5), menu)
        assert np.all(values[:, :, [0, 2]] == 0.0)

    def test_menu_length_mismatch(self, linear_panel, capital_system):
        with pytest.raises(SystemSpecError):
            capital_system.evaluate_menu(linear_panel(n=5), [(InstrumentTerm('K', 1),)])
