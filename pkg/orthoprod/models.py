"""
Pydantic result records.

Defines the serialized outputs of estimation, Monte Carlo replication and
the Lasso oracle study.
"""

import math
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

Z_975 = 1.959964


class DerivedQuantity(BaseModel):
    """Smooth function of the estimated parameters with a delta-method SE."""
    value: float = Field(..., description="Point estimate")
    se: float = Field(..., description="Delta-method standard error")
    ci: List[float] = Field(..., description="95% confidence interval (lo, hi)")


class DgmmResult(BaseModel):
    """Point estimates with sandwich covariance and 95% intervals."""
    estimator: str = Field(..., description="dgmm, pi or ols")
    param_names: List[str] = Field(..., description="Names of the estimated parameters")
    theta: List[float] = Field(..., description="Point estimates")
    sigma: List[List[float]] = Field(..., description="Asymptotic covariance of sqrt(n)(theta_hat - theta)")
    se: List[float] = Field(..., description="Standard errors sqrt(diag(sigma)/n)")
    ci: List[List[float]] = Field(..., description="95% intervals per parameter")
    n: int = Field(..., description="Number of firms")
    objective: Optional[float] = Field(default=None, description="GMM objective at the optimum")
    psi_bar_norm: Optional[float] = Field(default=None, description="Euclidean norm of the mean moment at the optimum")
    derived: Dict[str, DerivedQuantity] = Field(default_factory=dict, description="Derived quantities")
    diagnostics: Dict[str, Any] = Field(default_factory=dict, description="Search and inference diagnostics")

    @classmethod
    def from_arrays(cls, estimator, param_names, theta, sigma, n, se=None, **extra) -> "DgmmResult":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if se is None:
            se = np.sqrt(np.clip(np.diag(sigma), 0.0, None) / n)
        se = np.asarray(se, dtype=float)
        ci = np.column_stack([theta - Z_975 * se, theta + Z_975 * se])
        return cls(
            estimator=estimator,
            param_names=list(param_names),
            theta=theta.tolist(),
            sigma=sigma.tolist(),
            se=se.tolist(),
            ci=ci.tolist(),
            n=int(n),
            **extra,
        )

    def get(self, name: str) -> float:
        return self.theta[self.param_names.index(name)]

    def se_of(self, name: str) -> float:
        return self.se[self.param_names.index(name)]

    def covers(self, name: str, value: float) -> bool:
        lo, hi = self.ci[self.param_names.index(name)]
        return lo <= value <= hi

    def to_csv_row(self) -> Dict[str, Any]:
        row = {"estimator": self.estimator, "n": self.n, "objective": self.objective}
        for name, value, se, (lo, hi) in zip(self.param_names, self.theta, self.se, self.ci):
            row[name] = value
            row[f"{name}_se"] = se
            row[f"{name}_ci_lo"] = lo
            row[f"{name}_ci_hi"] = hi
        for name, q in self.derived.items():
            row[name] = q.value
            row[f"{name}_se"] = q.se
        return row


class RepRecord(BaseModel):
    """One Monte Carlo replication."""
    rep: int = Field(..., description="Replication index")
    seed: int = Field(..., description="Replication seed")
    estimates: Dict[str, float] = Field(default_factory=dict, description="theta_k estimate per estimator")
    ses: Dict[str, float] = Field(default_factory=dict, description="Standard error per estimator")
    covered: Dict[str, bool] = Field(default_factory=dict, description="Whether the 95% CI covers the truth")
    naive_se: Dict[str, float] = Field(default_factory=dict, description="First-stage-ignoring sandwich SE")
    at_boundary: Dict[str, bool] = Field(default_factory=dict, description="Whether the optimum sits on the search bracket end")
    error: Optional[str] = Field(default=None, description="Failure message for failed reps")


class EstimatorSummary(BaseModel):
    bias: float = Field(..., description="Mean of theta_hat - theta_0")
    mean_se: float = Field(..., description="Mean reported standard error")
    rmse: float = Field(..., description="Root mean squared error")
    coverage: float = Field(..., description="Share of 95% intervals covering the truth")
    coverage_mcse: float = Field(..., description="Monte Carlo SE of the coverage proportion")
    sd: float = Field(..., description="Sd of theta_hat across reps (ddof=0)")
    successes: int = Field(..., description="Successful reps")
    boundary_share: float = Field(default=0.0, description="Share of successful reps with a bracket-end optimum")


class McReport(BaseModel):
    """Replication study for one (DGP, n) cell."""
    dgp: Optional[int] = Field(default=None, description="DGP preset")
    n: int = Field(..., description="Firms per replication")
    reps: int = Field(..., description="Requested replications")
    truth: float = Field(..., description="True theta_k")
    summaries: Dict[str, EstimatorSummary] = Field(default_factory=dict, description="Per-estimator summary")
    records: List[RepRecord] = Field(default_factory=list, description="Per-rep records")
    failed: int = Field(default=0, description="Failed replications")
    config: Dict[str, Any] = Field(default_factory=dict, description="Configuration used")

    def table_row(self) -> Dict[str, Any]:
        """Bias, SE, RMSE and 95% coverage columns for PI and DGMM."""
        row = {"dgp": self.dgp, "n": self.n}
        for metric, attr in (("Bias", "bias"), ("SE", "mean_se"), ("RMSE", "rmse"), ("95Cvg", "coverage")):
            for label, key in (("PI", "pi"), ("DGMM", "dgmm")):
                summary = self.summaries.get(key)
                row[f"{label} {metric}"] = getattr(summary, attr) if summary else math.nan
        return row


TABLE_COLUMNS = [
    "dgp", "n",
    "PI Bias", "DGMM Bias", "PI SE", "DGMM SE", "PI RMSE", "DGMM RMSE", "PI 95Cvg", "DGMM 95Cvg",
]


class LassoCheckRow(BaseModel):
    n: int = Field(..., description="Sample size")
    reps: int = Field(..., description="Replications")
    mse: float = Field(..., description="Mean of ||beta_hat - beta_0||^2")
    selection_rate: float = Field(..., description="Share of reps whose active set is exactly the true support")
    lam: float = Field(..., description="Penalty level used")
