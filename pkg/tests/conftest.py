import numpy as np
import pytest

from orthoprod.config import DgpConfig, RunConfig
from orthoprod.data import PanelDataset
from orthoprod.moments import capital_only_system, cobb_douglas_two_input_system
from orthoprod.montecarlo import simulate_dgp

TRUE_THETA = (0.5, 0.8, 0.6)


def make_linear_panel(n=200, seed=0, theta=TRUE_THETA, inputs=("K",), proxy="I", T=3,
                      xi_sd=0.0, eps_sd=0.0):
    """
    Panel from Y_t = theta_1 + X_t'theta_p + omega_t + eps_t with AR(1) omega
    and inputs/proxy drawn independently. With xi_sd = eps_sd = 0 every CMR
    holds exactly at theta when eta_t = Y_t.
    """
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=float)
    theta_1, theta_p, theta_omega = theta[0], theta[1:-1], theta[-1]
    omega = np.empty((n, T))
    omega[:, 0] = rng.normal(0.0, 1.0, n)
    for t in range(1, T):
        omega[:, t] = theta_omega * omega[:, t - 1] + xi_sd * rng.standard_normal(n)
    variables = {x: rng.normal(0.0, 1.0, (n, T)) for x in inputs}
    variables[proxy] = rng.normal(0.0, 1.0, (n, T))
    X = np.stack([variables[x] for x in inputs], axis=-1)
    variables["Y"] = theta_1 + X @ theta_p + omega + eps_sd * rng.standard_normal((n, T))
    return PanelDataset(variables=variables, latent={"omega": omega})


@pytest.fixture
def linear_panel():
    return make_linear_panel


@pytest.fixture(scope="session")
def capital_system():
    return capital_only_system()


@pytest.fixture(scope="session")
def two_input_system():
    return cobb_douglas_two_input_system(3)


@pytest.fixture(scope="session")
def sim_panel():
    """400 firms from the default (DGP 1) simulator."""
    return simulate_dgp(DgpConfig(), n=400, seed=7)


@pytest.fixture(scope="session")
def oracle_eta(sim_panel):
    """True E[Y_t | Z_t] for t = 1, 2: output net of its noise."""
    return (sim_panel.variables["Y"] - sim_panel.latent["eps"])[:, :2]


@pytest.fixture
def fast_config(tmp_path):
    """Ridge first stage and sandwich PI errors so estimation runs in seconds."""
    return RunConfig(fast=True, out_dir=str(tmp_path), pi={"se_method": "sandwich"})


@pytest.fixture
def lasso_instance():
    def make(seed=0, J=2, N=200, r=10):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((J, N, r))
        f = rng.standard_normal((J, N))
        return M, f
    return make


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: Monte Carlo and end-to-end checks that take more than a few seconds"
    )
