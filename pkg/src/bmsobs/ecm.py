"""Second-order RC equivalent circuit model of a lithium-ion cell.

State ``x = [v1, v2, z]``: voltages across the two RC pairs and the
normalised state of charge. Current is positive on discharge.

    dv1/dt = -v1/tau1 + i/c1
    dv2/dt = -v2/tau2 + i/c2
    dz/dt  = -i/q
    v      = ocv(z) - v1 - v2 - rs*i
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm

log = logging.getLogger(__name__)

#: SOC range over which the built-in OCV fit is trusted.
OCV_VALID_RANGE = (0.10, 1.00)


@dataclass(frozen=True)
class ECMParams:
    """Circuit constants. Resistances in ohm, capacitances in farad,
    capacity in ampere-seconds."""

    r1: float
    r2: float
    c1: float
    c2: float
    rs: float
    capacity_q: float

    def __post_init__(self):
        for name in ("r1", "r2", "c1", "c2", "rs", "capacity_q"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"ECMParams.{name} must be positive and finite, got {value!r}")

    @property
    def tau1(self) -> float:
        return self.r1 * self.c1

    @property
    def tau2(self) -> float:
        return self.r2 * self.c2

    @property
    def one_c_current(self) -> float:
        """Current (A) that empties the cell in one hour."""
        return self.capacity_q / 3600.0

    @classmethod
    def from_mah(cls, r1, r2, c1, c2, rs, capacity_mah) -> "ECMParams":
        return cls(r1, r2, c1, c2, rs, capacity_mah * 3.6)


@dataclass(frozen=True)
class OCVPolynomial:
    """Open-circuit voltage ``sum(a_k * z**k)``; ``coefficients[k] = a_k``."""

    coefficients: tuple[float, ...]
    valid_range: tuple[float, float] = OCV_VALID_RANGE

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        if len(coeffs) < 2:
            raise ValueError("OCV polynomial needs degree >= 1")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, z, order: int = 0):
        return ocv_eval(self, z, order)

    def in_valid_range(self, z) -> bool:
        lo, hi = self.valid_range
        return bool(lo <= z <= hi)


@functools.lru_cache(maxsize=64)
def _derivative_coefficients(coefficients: tuple[float, ...], order: int) -> tuple[float, ...]:
    # coefficient of z**j in the order-th derivative is a[j+order] * (j+order)!/j!
    return tuple(a * math.perm(j + order, order) for j, a in enumerate(coefficients[order:]))


def ocv_eval(p: OCVPolynomial, z, order: int = 0):
    """``order``-th derivative of the OCV at ``z``, by Horner's scheme.

    Works for floats, numpy arrays and arbitrary-precision scalars
    (anything supporting ``*`` and ``+`` with Python floats).
    """
    if order < 0:
        raise ValueError("derivative order must be >= 0")
    if order > len(p.coefficients) - 1:
        return 0.0 * z
    d = _derivative_coefficients(p.coefficients, order)
    acc = d[-1]
    for c in d[-2::-1]:
        acc = acc * z + c
    return acc


class ECMState(NamedTuple):
    v1: float
    v2: float
    z: float


# Kokam SLPB533459 740 mAh NMC pouch cell at 20 degC.
# Rounded to 3 significant figures the coefficients cancel catastrophically
# (they give ~323 V at z=0.85). The full-precision values below round to
# KOKAM_OCV_ROUNDED coefficient by coefficient; among all such polynomials
# they minimise the integral of ocv''(z)**2 over [0.1, 1] while passing
# through 4.025 V at z=0.85 and 4.123 V at z=0.95.
KOKAM_OCV_ROUNDED = (
    2.83, 2.41e1, -4.19e2, 4.28e3, -2.73e4, 1.16e5, -3.38e5,
    6.88e5, -9.70e5, 9.27e5, -5.71e5, 2.05e5, -3.24e4,
)
KOKAM_OCV_COEFFICIENTS = (
    2.825005000085345,
    24.05005000018355,
    -419.49949999919414,
    4275.005000006986,
    -27282.05995434833,
    115886.58503860807,
    -338499.499999255,
    688222.6125831074,
    -969804.5258613295,
    926500.5000025417,
    -571405.5385598566,
    204932.57713817657,
    -32428.854527341566,
)
KOKAM_PARAMS = ECMParams.from_mah(
    r1=2.85e-2, r2=4.44e-2, c1=4.78e2, c2=1.83e4, rs=5.55e-2, capacity_mah=740.0
)
KOKAM_OCV = OCVPolynomial(KOKAM_OCV_COEFFICIENTS)

PARAMETER_SETS = {"kokam-slpb533459": (KOKAM_PARAMS, KOKAM_OCV)}


def builtin_parameters(name: str = "kokam-slpb533459") -> tuple[ECMParams, OCVPolynomial]:
    try:
        return PARAMETER_SETS[name]
    except KeyError:
        raise KeyError(f"unknown parameter set {name!r}; known: {sorted(PARAMETER_SETS)}") from None


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Input-affine model ``dx/dt = A x + g u``, ``y = c.x + ocv(x[soc]) + d u``.

    Every variant in this package has a linear drift and an output that is
    nonlinear only through the OCV of the SOC coordinate, so the model is
    fully described by ``A``, ``g``, ``c``, ``d`` and the OCV.
    """

    name: str
    state_labels: tuple[str, ...]
    drift_matrix: np.ndarray
    input_vector: np.ndarray
    output_linear: np.ndarray
    feedthrough: float
    ocv: OCVPolynomial
    soc_index: int = 2
    bias_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.state_labels)
        for name, shape in (("drift_matrix", (n, n)), ("input_vector", (n,)), ("output_linear", (n,))):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def state_dim(self) -> int:
        return len(self.state_labels)

    @property
    def bias_indices(self) -> tuple[int, ...]:
        return tuple(self.state_labels.index(b) for b in self.bias_labels)

    def drift(self, x):
        return self.drift_matrix @ np.asarray(x)

    def output(self, x):
        x = np.asarray(x)
        return self.output_linear @ x + self.ocv(x[self.soc_index])

    def measurement(self, x, u):
        """Output including the direct feedthrough of the (measured) input."""
        return self.output(x) + self.feedthrough * u

    def drift_jacobian(self, x=None) -> np.ndarray:
        return self.drift_matrix

    def output_gradient(self, x) -> np.ndarray:
        grad = np.array(self.output_linear, dtype=float)
        grad[self.soc_index] += self.ocv(float(x[self.soc_index]), 1)
        return grad

    def output_hessian(self, x) -> np.ndarray:
        hess = np.zeros((self.state_dim, self.state_dim))
        i = self.soc_index
        hess[i, i] = self.ocv(float(x[i]), 2)
        return hess

    def discrete(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact zero-order-hold transition ``(Phi, Gamma)`` for step ``dt``."""
        return _zoh(self, float(dt))


@functools.lru_cache(maxsize=256)
def _zoh(m: ModelSpec, dt: float) -> tuple[np.ndarray, np.ndarray]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = m.state_dim
    block = np.zeros((n + 1, n + 1))
    block[:n, :n] = m.drift_matrix
    block[:n, n] = m.input_vector
    e = expm(block * dt)
    phi, gamma = e[:n, :n].copy(), e[:n, n].copy()
    phi.setflags(write=False)
    gamma.setflags(write=False)
    return phi, gamma


def build_original_model(p: ECMParams, ocv: OCVPolynomial) -> ModelSpec:
    return ModelSpec(
        name="original",
        state_labels=("v1", "v2", "z"),
        drift_matrix=np.diag([-1.0 / p.tau1, -1.0 / p.tau2, 0.0]),
        input_vector=np.array([1.0 / p.c1, 1.0 / p.c2, -1.0 / p.capacity_q]),
        output_linear=np.array([-1.0, -1.0, 0.0]),
        feedthrough=-p.rs,
        ocv=ocv,
    )


def discretize_step(p: ECMParams, x: ECMState, current: float, dt: float) -> ECMState:
    """Advance the circuit by ``dt`` seconds under constant ``current``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    e1 = math.exp(-dt / p.tau1)
    e2 = math.exp(-dt / p.tau2)
    v1, v2, z = x
    return ECMState(
        e1 * v1 + p.r1 * (1.0 - e1) * current,
        e2 * v2 + p.r2 * (1.0 - e2) * current,
        z - dt * current / p.capacity_q,
    )


@dataclass
class SimulationResult:
    t: np.ndarray
    current: np.ndarray
    states: np.ndarray  # (N, 3): v1, v2, z at each sample time
    voltage: np.ndarray  # terminal voltage at each sample time
    saturated: np.ndarray  # True where the truth SOC was clamped

    @property
    def soc(self) -> np.ndarray:
        return self.states[:, 2]

    @property
    def saturation_events(self) -> int:
        return int(self.saturated.sum())


def _profile_currents(current_profile, dt: float) -> np.ndarray:
    prof = np.asarray(current_profile, dtype=float)
    if prof.ndim == 1:
        return prof
    if prof.ndim != 2 or prof.shape[1] != 2:
        raise ValueError("current profile must be 1-D currents or (t, current) pairs")
    t = prof[:, 0]
    if not np.allclose(np.diff(t), dt, rtol=0, atol=1e-9 * max(1.0, dt)):
        raise ValueError(f"profile times are not sampled every dt={dt}")
    return prof[:, 1]


_SOC_SLACK = 1e-12


def simulate(
    p: ECMParams,
    ocv: OCVPolynomial,
    x0: ECMState | Sequence[float],
    current_profile,
    dt: float = 1.0,
) -> SimulationResult:
    """Simulate the circuit under a zero-order-hold current profile.

    Sample ``k`` holds the state at ``t_k`` and the terminal voltage with
    current ``i_k`` flowing; ``i_k`` is held until ``t_{k+1}``. SOC leaving
    [0, 1] is clamped and flagged (beyond a 1e-12 round-off slack).
    """
    currents = _profile_currents(current_profile, dt)
    n = len(currents)
    states = np.empty((n, 3))
    saturated = np.zeros(n, dtype=bool)
    x = ECMState(*map(float, x0))
    for k in range(n):
        states[k] = x
        if k + 1 < n:
            x = discretize_step(p, x, currents[k], dt)
            if not 0.0 <= x.z <= 1.0:
                # round-off at exactly empty/full is clamped but not flagged
                saturated[k + 1] = not -_SOC_SLACK <= x.z <= 1.0 + _SOC_SLACK
                x = x._replace(z=min(max(x.z, 0.0), 1.0))
    if saturated.any():
        log.warning("truth SOC saturated at %d samples", int(saturated.sum()))
    voltage = ocv(states[:, 2]) - states[:, 0] - states[:, 1] - p.rs * currents
    return SimulationResult(
        t=np.arange(n) * dt, current=currents, states=states, voltage=voltage, saturated=saturated
    )
