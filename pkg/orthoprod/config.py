"""
Run configuration for orthoprod.

Every command reads its parameters from a RunConfig built from, in increasing
precedence: field defaults, environment variables, one TOML config file with
a table per section, and command-line flags. Defaults reproduce the Monte
Carlo settings of the method (c1=1.1, c2=0.5/log(n v r), L=5, boosted-tree
first stage, identity weighting).
"""

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from orthoprod.errors import ConfigError


GBT_DEFAULTS = {
    "n_trees": 2000,
    "max_depth": 3,
    "min_node_size": 10,
    "shrinkage": 0.001,
    "bag_fraction": 0.5,
    "train_fraction": 0.5,
    "predict_trees": 500,
    "linear_init": 1.0,
    "select_stages": 1.0,
}

RIDGE_DEFAULTS = {
    "ridge": 1.0,
    "terms_per_variable": 5,
}

INVEST_SHOCK_BY_DGP = {1: 0.0, 2: 0.5, 3: 0.7}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DgpConfig(_Section):
    """Parameters of the simulated production-function panel."""

    theta_1: float = Field(default=0.0, description="Output intercept")
    theta_k: float = Field(default=1.0, description="Capital elasticity")
    theta_omega: float = Field(default=0.7, gt=-1.0, lt=1.0, description="AR(1) coefficient of productivity")
    sigma_omega: float = Field(default=0.1, ge=0.0, description="Stationary sd of productivity")
    one_minus_delta: float = Field(default=0.9, ge=0.0, le=1.0, description="Capital retention rate")
    gamma_0: float = Field(default=0.0, description="Investment policy intercept")
    gamma_1: float = Field(default=-0.7, description="Investment policy capital slope")
    gamma_2: float = Field(default=5.0, description="Investment policy productivity slope")
    mu_log_mean: float = Field(default=1.0, description="Mean of log capital-accumulation shock")
    mu_log_sd: float = Field(default=1.0, ge=0.0, description="Sd of log capital-accumulation shock")
    invest_shock_sd: float = Field(default=0.0, ge=0.0, description="Sd of the additive investment shock")
    burn_in: int = Field(default=100, ge=2, description="Total simulated periods; the last keep_periods are kept")
    keep_periods: int = Field(default=3, ge=2, description="Number of trailing periods kept")
    eps_sd: float = Field(default=0.1, ge=0.0, description="Sd of the output noise")
    k0: float = Field(default=1.0, gt=0.0, description="Initial capital level")
    max_resim_share: float = Field(default=0.01, ge=0.0, le=1.0, description="Maximum share of firms resimulated after overflow")

    @field_validator("keep_periods")
    @classmethod
    def _window(cls, value, info):
        burn_in = info.data.get("burn_in")
        if burn_in is not None and value > burn_in:
            raise ValueError("keep_periods cannot exceed burn_in")
        return value

    @classmethod
    def preset(cls, dgp: int, **overrides) -> "DgpConfig":
        """DGP 1 (no investment shock), 2 (sd 0.5) or 3 (sd 0.7)."""
        if dgp not in INVEST_SHOCK_BY_DGP:
            raise ConfigError(f"Unknown DGP preset {dgp}; expected one of {sorted(INVEST_SHOCK_BY_DGP)}")
        values = {**overrides, "invest_shock_sd": INVEST_SHOCK_BY_DGP[dgp]}
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(f"Invalid DGP configuration: {e}") from e


class RegressorSpec(_Section):
    """First-stage regressor choice and its hyperparameters."""

    kind: Literal["gradient_boosted_trees", "ridge_basis"] = Field(
        default="gradient_boosted_trees", description="First-stage learner"
    )
    hyperparameters: Dict[str, float] = Field(
        default_factory=dict, description="Overrides of the learner defaults"
    )

    def resolved(self) -> Dict[str, float]:
        defaults = GBT_DEFAULTS if self.kind == "gradient_boosted_trees" else RIDGE_DEFAULTS
        unknown = set(self.hyperparameters) - set(defaults)
        if unknown:
            raise ConfigError(f"Unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        return {**defaults, **self.hyperparameters}


class SolverConfig(_Section):
    """Constants of the OR-IV penalized program and its coordinate-descent solver."""

    c1: float = Field(default=1.1, gt=0.0, description="Penalty level multiplier")
    c2: Optional[float] = Field(default=None, gt=0.0, description="Quantile constant; None uses 0.5/log(n v r)")
    cd_tol: float = Field(default=1e-7, gt=0.0, description="Max coordinate change that ends the sweeps")
    max_sweeps: int = Field(default=1000, ge=1, description="Coordinate-descent sweep cap")
    max_loading_iter: int = Field(default=10, ge=1, description="Penalty-loading update cap")
    loading_tol: float = Field(default=1e-4, gt=0.0, description="Relative beta change that ends loading updates")
    loading_floor: float = Field(default=1e-12, gt=0.0, description="Floor for penalty loadings")
    gram_jitter: float = Field(default=1e-10, ge=0.0, description="Ridge jitter (times trace/r) for the initial OLS")
    low_dim: Optional[int] = Field(default=None, ge=0, description="Low-dimensional dictionary size; None uses the model default")
    basis_terms: Optional[int] = Field(default=None, ge=2, description="Exponential terms per variable; None uses the model default")
    design: Literal["production", "general"] = Field(default="production", description="Design-matrix builder")

    def resolve_c2(self, n: int, r: int) -> float:
        if self.c2 is not None:
            return self.c2
        return default_c2(n, r)


def default_c2(n: int, r: int, scale: float = 0.5) -> float:
    return scale / math.log(max(n, r))


class GmmConfig(_Section):
    """Search and inference settings for the GMM step."""

    bracket_lo: float = Field(default=0.0, description="Lower end of the theta_k search bracket")
    bracket_hi: float = Field(default=2.0, description="Upper end of the theta_k search bracket")
    grid_points: int = Field(default=101, ge=3, description="Coarse grid size for 1-D search")
    golden_tol: float = Field(default=1e-8, gt=0.0, description="Final bracket width of the golden-section search")
    restarts: int = Field(default=3, ge=1, description="Nelder-Mead restarts for multi-dimensional search")
    simplex_step: float = Field(default=0.1, gt=0.0, description="Initial simplex edge length")
    max_iter: int = Field(default=4000, ge=1, description="Nelder-Mead iteration cap")
    weighting: Literal["identity", "optimal"] = Field(default="identity", description="GMM weighting matrix")
    profile: bool = Field(default=True, description="Profile intercept and AR(1) coefficient out of the search")
    fd_scale: float = Field(default=1e-5, gt=0.0, description="Finite-difference step scale h = scale*(1+|theta|)")

    @field_validator("bracket_hi")
    @classmethod
    def _ordered(cls, value, info):
        lo = info.data.get("bracket_lo")
        if lo is not None and value <= lo:
            raise ValueError("bracket_hi must exceed bracket_lo")
        return value


class PiConfig(_Section):
    """Naive plug-in benchmark settings."""

    bootstrap_reps: int = Field(default=200, ge=50, description="Firm-level bootstrap resamples")
    max_skip_share: float = Field(default=0.1, ge=0.0, le=1.0, description="Maximum share of failed resamples")
    se_method: Literal["bootstrap", "sandwich"] = Field(default="bootstrap", description="Standard-error method")
    include_constant: bool = Field(default=False, description="Add a constant instrument")


class MonteCarloConfig(_Section):
    """Replication-study settings."""

    dgp: List[int] = Field(default_factory=lambda: [1], description="DGP presets to run (1, 2, 3)")
    n_grid: List[int] = Field(default_factory=lambda: [1000], description="Sample sizes")
    reps: int = Field(default=500, ge=1, description="Replications per (DGP, n)")
    fast_reps: int = Field(default=200, ge=1, description="Replication cap in fast mode")
    histogram_bins: int = Field(default=20, ge=1, description="Bins of the standardized-estimate histogram")
    max_failure_share: float = Field(default=0.05, ge=0.0, le=1.0, description="Maximum share of failed reps")

    @field_validator("dgp")
    @classmethod
    def _known_dgp(cls, value):
        for d in value:
            if d not in INVEST_SHOCK_BY_DGP:
                raise ValueError(f"Unknown DGP preset {d}")
        return value


class LassoCheckConfig(_Section):
    """Lasso oracle study with generated regressors."""

    n_grid: List[int] = Field(default_factory=lambda: [500, 1000, 5000, 10000], description="Sample sizes")
    reps: int = Field(default=200, ge=1, description="Replications per n")
    dim: int = Field(default=100, ge=3, description="Number of regressors")
    equations: int = Field(default=2, ge=1, description="Number of equations sharing beta")
    c2_scale: float = Field(default=5.0, gt=0.0, description="c2 = c2_scale/log(n v dim)")
    perturbation_exponent: float = Field(default=-0.4, description="Generated-regressor shift n**exponent")
    noise_sd: float = Field(default=1.0, ge=0.0, description="Sd of the equation noise")


class DataConfig(_Section):
    """Long-format CSV schema."""

    firm_id: str = Field(default="firm_id", description="Firm identifier column")
    period: str = Field(default="period", description="Period column")
    columns: Dict[str, str] = Field(
        default_factory=lambda: {"Y": "Y", "K": "K", "I": "I"},
        description="Model variable name -> CSV column",
    )


class RunConfig(_Section):
    """Configuration of one orthoprod command."""

    seed: int = Field(default=0, ge=0, description="Master seed")
    workers: int = Field(default=1, ge=1, description="Parallel workers")
    folds: int = Field(default=5, ge=2, description="Cross-fitting folds")
    model: Literal["capital_only", "cobb_douglas_two_input"] = Field(default="capital_only", description="Moment system")
    n_firms: int = Field(default=1000, ge=1, description="Firms simulated by the simulate command")
    fast: bool = Field(default=False, description="Ridge first stage and capped reps")
    out_dir: str = Field(default="results", description="Output directory")
    log_level: str = Field(default="INFO", description="Logging level")
    debug_lasso: bool = Field(default=False, description="Dump per-fold lasso solutions as JSON lines")

    dgp: DgpConfig = Field(default_factory=DgpConfig)
    first_stage: RegressorSpec = Field(default_factory=RegressorSpec)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    gmm: GmmConfig = Field(default_factory=GmmConfig)
    pi: PiConfig = Field(default_factory=PiConfig)
    montecarlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    lasso_check: LassoCheckConfig = Field(default_factory=LassoCheckConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @field_validator("log_level")
    @classmethod
    def _level(cls, value):
        value = value.upper()
        if value not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level {value}")
        return value

    @classmethod
    def build(cls, **values) -> "RunConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @classmethod
    def from_env(cls) -> "RunConfig":
        """Create configuration from environment variables."""
        return cls.build(**_env_values())

    @classmethod
    def from_file(cls, path, use_env: bool = True) -> "RunConfig":
        """Load a TOML file with top-level keys and one table per section."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with open(path, "rb") as f:
                values = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Cannot parse config file {path}: {e}") from e
        merged = _env_values() if use_env else {}
        merged.update(values)
        return cls.build(**merged)

    def with_overrides(self, **flags) -> "RunConfig":
        """Apply non-None flag values; dotted keys address section fields."""
        data = self.model_dump()
        for key, value in flags.items():
            if value is None:
                continue
            section, _, field = key.partition(".")
            if field:
                data[section][field] = value
            else:
                data[section] = value
        return RunConfig.build(**data)

    def effective_first_stage(self) -> RegressorSpec:
        if self.fast and self.first_stage.kind == "gradient_boosted_trees":
            return RegressorSpec(kind="ridge_basis")
        return self.first_stage

    def effective_reps(self) -> int:
        if self.fast:
            return min(self.montecarlo.reps, self.montecarlo.fast_reps)
        return self.montecarlo.reps


def _env_values() -> Dict[str, object]:
    values = {}
    mapping = {
        "ORTHOPROD_SEED": ("seed", int),
        "ORTHOPROD_WORKERS": ("workers", int),
        "ORTHOPROD_LOG_LEVEL": ("log_level", str),
        "ORTHOPROD_OUT_DIR": ("out_dir", str),
    }
    for env, (key, cast) in mapping.items():
        raw = os.getenv(env)
        if raw is None:
            continue
        try:
            values[key] = cast(raw)
        except ValueError as e:
            raise ConfigError(f"Invalid value for {env}: {raw!r}") from e
    return values
