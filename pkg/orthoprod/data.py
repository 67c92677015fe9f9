"""
Panel data model, long-format CSV ingestion and cross-fitting fold plans.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from orthoprod.config import DataConfig
from orthoprod.errors import ArgumentError, PanelParseError, SchemaError

logger = logging.getLogger(__name__)


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PanelDataset:
    """
    Balanced firm x period panel of log variables.

    ``variables`` maps model names (Y, K, I, L, E) to (n_firms, n_periods)
    arrays. ``latent`` carries simulator-only series such as productivity and
    is never written to CSV.
    """
    variables: Mapping[str, np.ndarray]
    firm_ids: tuple = ()
    periods: tuple = ()
    latent: Mapping[str, np.ndarray] = field(default_factory=dict)
    dropped_firms: int = 0

    def __post_init__(self):
        if not self.variables:
            raise SchemaError("A panel needs at least one variable")
        shapes = {name: np.shape(v) for name, v in self.variables.items()}
        shape = next(iter(shapes.values()))
        if len(shape) != 2 or any(s != shape for s in shapes.values()):
            raise SchemaError(f"All panel variables must share one (firms x periods) shape, got {shapes}")
        variables = {name: _frozen(v) for name, v in self.variables.items()}
        for name, v in variables.items():
            if not np.all(np.isfinite(v)):
                raise PanelParseError(f"Variable {name} has missing or non-finite values")
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "latent", {name: _frozen(v) for name, v in self.latent.items()})
        if not self.firm_ids:
            object.__setattr__(self, "firm_ids", tuple(range(shape[0])))
        if not self.periods:
            object.__setattr__(self, "periods", tuple(range(1, shape[1] + 1)))

    @property
    def n_firms(self) -> int:
        return next(iter(self.variables.values())).shape[0]

    @property
    def n_periods(self) -> int:
        return next(iter(self.variables.values())).shape[1]

    def has(self, name: str) -> bool:
        return name in self.variables

    def column(self, name: str, t: int) -> np.ndarray:
        """Values of variable ``name`` in period position ``t`` (1-based)."""
        if name not in self.variables:
            raise SchemaError(f"Panel has no variable {name!r}; available: {sorted(self.variables)}")
        if not 1 <= t <= self.n_periods:
            raise SchemaError(f"Period {t} outside 1..{self.n_periods}")
        return self.variables[name][:, t - 1]

    def take(self, indices) -> "PanelDataset":
        """Firm subset (duplicates allowed, e.g. for bootstrap resamples)."""
        indices = np.asarray(indices, dtype=int)
        return PanelDataset(
            variables={k: v[indices] for k, v in self.variables.items()},
            firm_ids=tuple(self.firm_ids[i] for i in indices),
            periods=self.periods,
            latent={k: v[indices] for k, v in self.latent.items()},
        )

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (firm, period)."""
        n, T = self.n_firms, self.n_periods
        frame = pd.DataFrame({
            "firm_id": np.repeat(np.asarray(self.firm_ids, dtype=object), T),
            "period": np.tile(np.asarray(self.periods), n),
        })
        for name, values in self.variables.items():
            frame[name] = values.reshape(-1)
        return frame


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignment: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        assignment = np.array(self.assignment, dtype=int)
        assignment.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)

    @property
    def n_firms(self) -> int:
        return len(self.assignment)

    def held_out(self, fold: int) -> np.ndarray:
        """Indices of I_l."""
        return np.flatnonzero(self.assignment == fold)

    def training(self, fold: int) -> np.ndarray:
        """Indices of the complement of I_l."""
        return np.flatnonzero(self.assignment != fold)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.n_folds)


def make_folds(n_firms: int, L: int = 5, seed: int = 0) -> FoldPlan:
    """Uniform random partition of firm indices into L folds, deterministic in seed."""
    if L < 2:
        raise ArgumentError(f"Need at least 2 folds, got L={L}")
    if L > n_firms:
        raise ArgumentError(f"Cannot split {n_firms} firms into {L} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_firms)
    assignment = np.empty(n_firms, dtype=int)
    assignment[perm] = np.arange(n_firms) % L
    return FoldPlan(n_folds=L, assignment=assignment, seed=seed)


def _id_key(value):
    try:
        return (0, float(value), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(value))


def load_panel_csv(path, schema: Optional[DataConfig] = None) -> PanelDataset:
    """
    Read a long-format CSV (firm id, period, variables) into a balanced panel.

    Firms missing any period, or with a missing value in any period, are
    dropped and counted in ``dropped_firms``. Firms are ordered by id so fold
    assignment does not depend on the row order of the file.
    """
    schema = schema or DataConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Panel file not found: {path}")

    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    needed = [schema.firm_id, schema.period, *schema.columns.values()]
    missing = [c for c in needed if c not in raw.columns]
    if missing:
        raise SchemaError(f"Columns {missing} not found in {path}; header is {list(raw.columns)}")

    frame = pd.DataFrame({"firm_id": raw[schema.firm_id].str.strip()})
    for target, source in [("period", schema.period), *schema.columns.items()]:
        text = raw[source].str.strip()
        numbers = pd.to_numeric(text.where(text != ""), errors="coerce")
        bad = numbers.isna() & (text != "")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2  # header is line 1
            raise PanelParseError(f"Non-numeric value {text[bad].iloc[0]!r} in column {source!r}", row=row)
        frame[target] = numbers

    if frame["period"].isna().any():
        row = int(np.flatnonzero(frame["period"].isna().to_numpy())[0]) + 2
        raise PanelParseError("Missing period", row=row)
    if frame.duplicated(["firm_id", "period"]).any():
        row = int(np.flatnonzero(frame.duplicated(["firm_id", "period"]).to_numpy())[0]) + 2
        raise PanelParseError("Duplicate (firm_id, period) pair", row=row)

    periods = sorted(frame["period"].unique())
    names = list(schema.columns)
    wide = frame.pivot(index="firm_id", columns="period", values=names)
    complete = wide.notna().all(axis=1)
    dropped = int((~complete).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} firms with incomplete period coverage from {path}")
    wide = wide[complete]
    if wide.empty:
        raise PanelParseError(f"No firm in {path} has complete coverage of periods {periods}")

    ids = sorted(wide.index, key=_id_key)
    wide = wide.loc[ids]
    variables = {name: wide[name][periods].to_numpy(dtype=float) for name in names}
    logger.info(f"Loaded panel with {len(ids)} firms x {len(periods)} periods from {path}")
    return PanelDataset(
        variables=variables,
        firm_ids=tuple(ids),
        periods=tuple(int(p) if float(p).is_integer() else p for p in periods),
        dropped_firms=dropped,
    )


def write_panel_csv(panel: PanelDataset, path) -> Path:
    path = Path(path)
    panel.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path
