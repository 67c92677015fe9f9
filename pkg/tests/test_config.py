import math

import pytest
from pydantic import ValidationError

from orthoprod.config import (
    DgpConfig,
    GmmConfig,
    RegressorSpec,
    RunConfig,
    SolverConfig,
    default_c2,
)
from orthoprod.errors import ConfigError


def test_defaults_match_the_simulation_settings():
    config = RunConfig()
    assert config.folds == 5
    assert config.solver.c1 == 1.1
    assert config.solver.c2 is None
    assert config.gmm.weighting == 'identity'
    assert (config.gmm.bracket_lo, config.gmm.bracket_hi) == (0.0, 2.0)
    assert config.gmm.grid_points == 101
    assert config.pi.bootstrap_reps == 200
    assert config.first_stage.kind == 'gradient_boosted_trees'
    assert config.dgp.theta_k == 1.0
    assert config.dgp.theta_omega == 0.7
    assert config.lasso_check.n_grid == [500, 1000, 5000, 10000]


def test_gbt_hyperparameters_resolve_with_overrides():
    spec = RegressorSpec(hyperparameters={'n_trees': 300})
    resolved = spec.resolved()
    assert resolved['n_trees'] == 300
    assert resolved['shrinkage'] == 0.001
    assert resolved['predict_trees'] == 500


def test_unknown_hyperparameter_is_rejected():
    with pytest.raises(ConfigError):
        RegressorSpec(kind='ridge_basis', hyperparameters={'max_depth': 2}).resolved()


@pytest.mark.parametrize('values', [
    {'folds': 1},
    {'workers': 0},
    {'model': 'translog'},
    {'log_level': 'chatty'},
    {'solver': {'c1': -1.0}},
    {'gmm': {'bracket_lo': 1.0, 'bracket_hi': 0.5}},
    {'dgp': {'theta_omega': 1.0}},
    {'montecarlo': {'dgp': [4]}},
    {'unknown_key': 1},
])
def test_invalid_values_raise_config_error(values):
    with pytest.raises(ConfigError):
        RunConfig.build(**values)


def test_keep_periods_cannot_exceed_burn_in():
    with pytest.raises(ValidationError):
        DgpConfig(burn_in=2, keep_periods=3)


@pytest.mark.parametrize('dgp,shock', [(1, 0.0), (2, 0.5), (3, 0.7)])
def test_dgp_presets(dgp, shock):
    config = DgpConfig.preset(dgp, theta_k=0.9)
    assert config.invest_shock_sd == shock
    assert config.theta_k == 0.9


def test_dgp_preset_errors():
    with pytest.raises(ConfigError):
        DgpConfig.preset(4)
    with pytest.raises(ConfigError):
        DgpConfig.preset(1, theta_omega=1.0)


def test_from_file_reads_sections(tmp_path):
    path = tmp_path / 'run.toml'
    path.write_text(
        'seed = 3\n'
        'fast = true\n'
        '[solver]\n'
        'c1 = 2.0\n'
        'design = "general"\n'
        '[montecarlo]\n'
        'n_grid = [250, 500]\n'
        'reps = 20\n'
    )
    config = RunConfig.from_file(path)
    assert config.seed == 3
    assert config.fast
    assert config.solver.c1 == 2.0
    assert config.solver.design == 'general'
    assert config.montecarlo.n_grid == [250, 500]
    assert config.effective_reps() == 20


def test_from_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(tmp_path / 'missing.toml')
    bad = tmp_path / 'bad.toml'
    bad.write_text('seed = = 3\n')
    with pytest.raises(ConfigError):
        RunConfig.from_file(bad)


def test_precedence_env_file_flags(tmp_path, monkeypatch):
    monkeypatch.setenv('ORTHOPROD_SEED', '9')
    monkeypatch.setenv('ORTHOPROD_WORKERS', '2')
    assert RunConfig.from_env().seed == 9

    path = tmp_path / 'run.toml'
    path.write_text('seed = 3\n')
    config = RunConfig.from_file(path)
    # file beats environment, environment fills the rest
    assert config.seed == 3
    assert config.workers == 2

    flagged = config.with_overrides(seed=11, workers=None)
    assert flagged.seed == 11
    assert flagged.workers == 2


def test_invalid_environment_value(monkeypatch):
    monkeypatch.setenv('ORTHOPROD_SEED', 'abc')
    with pytest.raises(ConfigError):
        RunConfig.from_env()


def test_dotted_overrides():
    config = RunConfig().with_overrides(**{'solver.c1': 0.5, 'montecarlo.reps': 10, 'lasso_check.n_grid': None})
    assert config.solver.c1 == 0.5
    assert config.montecarlo.reps == 10
    assert config.lasso_check.n_grid == [500, 1000, 5000, 10000]
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(**{'solver.max_sweeps': 0})


def test_fast_mode():
    config = RunConfig(fast=True)
    assert config.effective_first_stage().kind == 'ridge_basis'
    assert config.effective_reps() == 200
    assert RunConfig(fast=True, montecarlo={'reps': 50}).effective_reps() == 50
    assert RunConfig().effective_reps() == 500
    assert RunConfig().effective_first_stage().kind == 'gradient_boosted_trees'


def test_c2_resolution():
    assert default_c2(800, 40) == pytest.approx(0.5 / math.log(800))
    assert default_c2(50, 125) == pytest.approx(0.5 / math.log(125))
    assert SolverConfig().resolve_c2(800, 40) == pytest.approx(0.5 / math.log(800))
    assert SolverConfig(c2=0.1).resolve_c2(800, 40) == 0.1


def test_gmm_config_rejects_reversed_bracket():
    with pytest.raises(ValidationError):
        GmmConfig(bracket_lo=2.0, bracket_hi=2.0)
