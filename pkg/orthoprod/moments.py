"""
Conditional moment restrictions of the proxy-variable production function.

Output follows Y_t = theta_1 + X_t'theta_p + omega_t + eps_t with AR(1)
productivity omega_t = theta_omega * omega_{t-1} + xi_t, and the first stage
eta_t(Z_t) = E[Y_t | Z_t] with Z_t = (proxy_t, inputs_t). For each period
t = 2..T the system holds a pair of CMRs, conditioned on Z_{t-1}:

    first stage   m = Y_{t-1} - eta_{t-1}(Z_{t-1})
    structural    m = Y_t - theta_1 - X_t'theta_p
                      - theta_omega * (eta_{t-1}(Z_{t-1}) - theta_1 - X_{t-1}'theta_p)

For T = 3 and X = K this is the four-CMR capital-only system in the order
(m1, m2, m3, m4).
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from orthoprod.data import PanelDataset
from orthoprod.errors import SystemSpecError
from orthoprod.firststage.crossfit import EtaTarget


@dataclass(frozen=True)
class InstrumentTerm:
    """variable_period ** power; power 0 is the constant 1."""
    variable: str
    period: int
    power: int = 1

    def evaluate(self, panel: PanelDataset) -> np.ndarray:
        if self.power == 0:
            return np.ones(panel.n_firms)
        return panel.column(self.variable, self.period) ** self.power

    def __str__(self):
        if self.power == 0:
            return "1"
        suffix = "" if self.power == 1 else f"^{self.power}"
        return f"{self.variable}{self.period}{suffix}"


# One instrument per CMR; None stands for the zero function.
Instrument = Tuple[Optional[InstrumentTerm], ...]


@dataclass(frozen=True)
class CmrSpec:
    index: int
    role: Literal["first_stage", "structural"]
    period: int
    eta: int
    conditioning: Tuple[Tuple[str, int], ...]


@dataclass(frozen=True)
class MomentSystem:
    kind: str
    inputs: Tuple[str, ...]
    proxy: str
    n_periods: int
    cmrs: Tuple[CmrSpec, ...]
    low_dim_default: Optional[int] = None
    basis_terms_default: Optional[int] = None

    @property
    def J(self) -> int:
        return len(self.cmrs)

    @property
    def n_eta(self) -> int:
        return self.n_periods - 1

    @property
    def param_names(self) -> Tuple[str, ...]:
        return ("theta_1", *(f"theta_{x.lower()}" for x in self.inputs), "theta_omega")

    @property
    def input_names(self) -> Tuple[str, ...]:
        return tuple(f"theta_{x.lower()}" for x in self.inputs)

    @property
    def structural(self) -> Tuple[CmrSpec, ...]:
        return tuple(c for c in self.cmrs if c.role == "structural")

    def variables(self) -> Tuple[str, ...]:
        return ("Y", *self.inputs, self.proxy)

    def validate(self, panel: PanelDataset) -> None:
        missing = [v for v in self.variables() if not panel.has(v)]
        if missing:
            raise SystemSpecError(f"{self.kind} needs panel variables {missing}")
        if panel.n_periods != self.n_periods:
            raise SystemSpecError(
                f"{self.kind} is built for T={self.n_periods} but the panel has {panel.n_periods} periods"
            )

    def conditioning_vars(self, t: int) -> Tuple[Tuple[str, int], ...]:
        return ((self.proxy, t), *((x, t) for x in self.inputs))

    def eta_targets(self) -> Tuple[EtaTarget, ...]:
        """eta_t = E[Y_t | Z_t] for t = 1..T-1."""
        return tuple(
            EtaTarget(name=f"eta{t}", response=("Y", t), conditioning=self.conditioning_vars(t))
            for t in range(1, self.n_periods)
        )

    def conditioning_values(self, panel: PanelDataset, j: int, rows=None) -> np.ndarray:
        Z = np.column_stack([panel.column(v, t) for v, t in self.cmrs[j].conditioning])
        return Z if rows is None else Z[rows]

    def split_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[0], theta[1:-1], theta[-1]

    def inputs_array(self, panel: PanelDataset) -> np.ndarray:
        """(n, T, p) stack of the input variables."""
        return np.stack([panel.variables[x] for x in self.inputs], axis=-1)

    def residuals(self, panel: PanelDataset, theta, eta) -> np.ndarray:
        """
        m_j for every firm, shape (n, J). ``eta`` holds eta_t(Z_t) in column
        t-1 for t = 1..T-1.
        """
        theta_1, theta_p, theta_omega = self.split_theta(theta)
        Y = panel.variables["Y"]
        F = theta_1 + self.inputs_array(panel) @ theta_p
        eta = np.asarray(eta, dtype=float)
        out = np.empty((panel.n_firms, self.J))
        for j, cmr in enumerate(self.cmrs):
            t = cmr.period
            if cmr.role == "first_stage":
                out[:, j] = Y[:, t - 1] - eta[:, cmr.eta]
            else:
                out[:, j] = Y[:, t - 1] - F[:, t - 1] - theta_omega * (eta[:, cmr.eta] - F[:, t - 2])
        return out

    def nu_tilde(self, theta) -> np.ndarray:
        """d m_j / d eta_s, shape (J, T-1); constant in the data for these systems."""
        theta_omega = self.split_theta(theta)[2]
        out = np.zeros((self.J, self.n_eta))
        for j, cmr in enumerate(self.cmrs):
            out[j, cmr.eta] = -1.0 if cmr.role == "first_stage" else -theta_omega
        return out

    def evaluate_menu(self, panel: PanelDataset, menu: Sequence[Instrument]) -> np.ndarray:
        """Instrument values f_{q,j}(Z_j) for all firms, shape (q, n, J)."""
        out = np.zeros((len(menu), panel.n_firms, self.J))
        for q, instrument in enumerate(menu):
            if len(instrument) != self.J:
                raise SystemSpecError(f"Instrument {q} has {len(instrument)} entries, system has J={self.J}")
            for j, term in enumerate(instrument):
                if term is not None:
                    out[q, :, j] = term.evaluate(panel)
        return out


def _paired_cmrs(inputs, proxy, T):
    cmrs = []
    for t in range(2, T + 1):
        z = ((proxy, t - 1), *((x, t - 1) for x in inputs))
        cmrs.append(CmrSpec(index=len(cmrs) + 1, role="first_stage", period=t - 1, eta=t - 2, conditioning=z))
        cmrs.append(CmrSpec(index=len(cmrs) + 1, role="structural", period=t, eta=t - 2, conditioning=z))
    return tuple(cmrs)


def capital_only_system() -> MomentSystem:
    """Y, K, I over T = 3: four CMRs, parameters (theta_1, theta_k, theta_omega)."""
    return MomentSystem(
        kind="capital_only",
        inputs=("K",),
        proxy="I",
        n_periods=3,
        cmrs=_paired_cmrs(("K",), "I", 3),
        low_dim_default=5,
    )


def cobb_douglas_two_input_system(T: int = 3) -> MomentSystem:
    """Y, L, K with intermediates E as proxy: 2(T-1) CMRs, parameters (theta_1, theta_l, theta_k, theta_omega)."""
    if T < 2:
        raise SystemSpecError(f"The two-input system needs T >= 2, got {T}")
    return MomentSystem(
        kind="cobb_douglas_two_input",
        inputs=("L", "K"),
        proxy="E",
        n_periods=T,
        cmrs=_paired_cmrs(("L", "K"), "E", T),
        basis_terms_default=5,
    )


def build_system(kind: str, T: int = 3) -> MomentSystem:
    if kind == "capital_only":
        if T != 3:
            raise SystemSpecError(f"capital_only is defined for T=3, got T={T}")
        return capital_only_system()
    if kind == "cobb_douglas_two_input":
        return cobb_douglas_two_input_system(T)
    raise SystemSpecError(f"Unknown moment system {kind!r}")


def capital_only_menu() -> Tuple[Instrument, ...]:
    """The four starting instrument vectors of the capital-only Monte Carlo."""
    K1, K2 = InstrumentTerm("K", 1), InstrumentTerm("K", 2)
    I1, I2 = InstrumentTerm("I", 1), InstrumentTerm("I", 2)
    return (
        (K1, K1, K2, K2),
        (I1, I1, I2, I2),
        (K1, K1, I2, I2),
        (K1, I1, I2, I2),
    )


def two_input_menu(T: int) -> Tuple[Instrument, ...]:
    """Per period pair (first stage, structural): (K,K), (K,K_t), (L,L), (K^2,K_t^2), (K^4,K_t^4) at t-1."""
    patterns = [
        (("K", 0, 1), ("K", 0, 1)),
        (("K", 0, 1), ("K", 1, 1)),
        (("L", 0, 1), ("L", 0, 1)),
        (("K", 0, 2), ("K", 1, 2)),
        (("K", 0, 4), ("K", 1, 4)),
    ]
    menu = []
    for pattern in patterns:
        entries = []
        for t in range(2, T + 1):
            for variable, shift, power in pattern:
                entries.append(InstrumentTerm(variable, t - 1 + shift, power))
        menu.append(tuple(entries))
    return tuple(menu)


def default_menu(system: MomentSystem) -> Tuple[Instrument, ...]:
    if system.kind == "capital_only":
        return capital_only_menu()
    return two_input_menu(system.n_periods)


def plugin_instruments(system: MomentSystem, include_constant: bool = False) -> Tuple[Instrument, ...]:
    """
    Conventional instruments for the plug-in estimator: lagged inputs and
    proxy and their squares, each on one structural CMR only.
    """
    menu = []
    for j, cmr in enumerate(system.cmrs):
        if cmr.role != "structural":
            continue
        lag = cmr.period - 1
        terms = [InstrumentTerm(v, lag) for v in (*system.inputs, system.proxy)]
        terms += [InstrumentTerm(v, lag, 2) for v in (*system.inputs, system.proxy)]
        if include_constant:
            terms.insert(0, InstrumentTerm("Y", lag, 0))
        for term in terms:
            entry = [None] * system.J
            entry[j] = term
            menu.append(tuple(entry))
    return tuple(menu)
