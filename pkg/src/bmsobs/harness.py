"""Synthetic drive cycles, measurement streams and filter scenario runs."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augmented import build_model
from .ecm import KOKAM_OCV, KOKAM_PARAMS, ECMParams, OCVPolynomial, SimulationResult, simulate
from .filters import FilterConfig, FilterDivergence, FilterState, UPDATES, predict

log = logging.getLogger(__name__)

CYCLE_KINDS = ("udc-like", "fuds-like", "constant", "rest")
FILTER_KINDS = tuple(UPDATES)
DEFAULT_CURRENT_SIGMA = 5e-3
CYCLE_PERIOD = 1000.0
# SOC drops ~15 % per 1000 s cycle: 0.15 * 3600 / 1000 C
DEFAULT_MEAN_C_RATE = 0.54


@dataclass(frozen=True)
class DriveCycle:
    t: np.ndarray
    current: np.ndarray
    label: str
    seed: int
    cap: float  # peak current bound, A

    @property
    def samples(self) -> np.ndarray:
        return np.column_stack([self.t, self.current])

    @property
    def duration(self) -> float:
        return float(len(self.t)) * self.dt

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 1.0


def _one_period(kind: str, period: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(period)
    k = 0
    charge = 0.0
    while k < period:
        length = int(rng.integers(5, 31))
        roll = rng.random()
        if roll < 0.25:
            level = 0.0
        elif kind == "fuds-like" and roll < 0.4:
            level = -rng.uniform(0.1, 0.6)
        else:
            level = rng.uniform(0.1, 1.0)
        seg = min(length, period - k)
        # never push the cell above its starting charge
        if charge + level * seg < 0:
            level = 0.0
        out[k:k + seg] = level
        charge += level * seg
        k += seg
    return out


def synthesize_cycle(
    kind: str,
    duration: float,
    seed: int = 0,
    c_rate_cap: float = 3.0,
    capacity_q: float = KOKAM_PARAMS.capacity_q,
    mean_c_rate: float = DEFAULT_MEAN_C_RATE,
    period: float = CYCLE_PERIOD,
) -> DriveCycle:
    """Deterministic 1 Hz current profile.

    ``constant`` draws ``c_rate_cap`` throughout; ``rest`` is all zeros. The
    drive-like kinds tile a random ``period``-second pattern of 5-30 s
    constant segments, including rests, scaled to ``mean_c_rate`` and clipped
    to ``c_rate_cap``. ``fuds-like`` adds regenerative (negative) segments.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if kind not in CYCLE_KINDS:
        raise ValueError(f"unknown cycle kind {kind!r}; expected one of {CYCLE_KINDS}")
    one_c = capacity_q / 3600.0
    cap = c_rate_cap * one_c
    n = int(round(duration))
    t = np.arange(n, dtype=float)
    if kind == "constant":
        current = np.full(n, cap)
    elif kind == "rest":
        current = np.zeros(n)
    else:
        rng = np.random.default_rng([seed, CYCLE_KINDS.index(kind)])
        base = _one_period(kind, int(period), rng)
        target = mean_c_rate * one_c
        for _ in range(50):
            scaled = np.clip(base * (target / base.mean()), -cap, cap)
            if abs(scaled.mean() - target) <= 1e-9 * target:
                break
            base = scaled
        current = np.resize(scaled, n)
    return DriveCycle(t=t, current=current, label=kind, seed=seed, cap=cap)


@dataclass(frozen=True)
class Scenario:
    name: str
    cycle: DriveCycle
    model_variant: str
    filter_kind: str
    config: FilterConfig
    estimator_initial: tuple[float, ...]
    true_initial: tuple[float, float, float] = (0.0, 0.0, 1.0)
    params: ECMParams = KOKAM_PARAMS
    ocv: OCVPolynomial = KOKAM_OCV
    voltage_bias: float = 0.0
    current_bias: float = 0.0
    voltage_noise_sigma: float = 6e-3
    current_noise_sigma: float = DEFAULT_CURRENT_SIGMA
    eval_window: tuple[float, float] = (1000.0, 2000.0)
    seed: int = 7

    def __post_init__(self):
        if self.filter_kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter {self.filter_kind!r}; expected one of {FILTER_KINDS}")
        t0, t1 = self.eval_window
        if not 0 <= t0 < t1 <= self.cycle.duration:
            raise ValueError(f"eval window {self.eval_window} outside cycle span [0, {self.cycle.duration}]")
        n = build_model(self.model_variant, self.params, self.ocv).state_dim
        if len(self.estimator_initial) != n or self.config.state_dim != n:
            raise ValueError(f"estimator initial state and tuning must have dimension {n}")

    def experiment_key(self) -> tuple:
        """Hashable summary of the truth and sensor side (what the filter sees)."""
        c = self.cycle
        return (c.label, c.seed, c.cap, c.t.tobytes(), c.current.tobytes(), self.true_initial,
                self.params, self.ocv, self.voltage_bias, self.current_bias,
                self.voltage_noise_sigma, self.current_noise_sigma, self.eval_window, self.seed)

    def estimator_key(self) -> tuple:
        cfg = self.config
        return (self.model_variant, self.estimator_initial, cfg.p0.tobytes(), cfg.q0.tobytes(),
                cfg.r, cfg.kappa, cfg.dt)

    def differs_only_in_filter(self, other: "Scenario") -> bool:
        return (self.experiment_key() == other.experiment_key()
                and self.estimator_key() == other.estimator_key())

    def same_experiment(self, other: "Scenario") -> bool:
        """Same truth and measurements; the estimator may differ in filter and model."""
        return self.experiment_key() == other.experiment_key()


@dataclass
class Measurements:
    voltage: np.ndarray
    current: np.ndarray


def make_measurements(sc: Scenario, truth: SimulationResult, seed: int | None = None) -> Measurements:
    """Biased, noisy sensor streams; voltage and current noise use separate
    seeded streams so either sigma can be changed independently."""
    seed = sc.seed if seed is None else seed
    n = len(truth.voltage)
    v_rng = np.random.default_rng([seed, 0])
    i_rng = np.random.default_rng([seed, 1])
    v = truth.voltage + sc.voltage_bias
    i = truth.current + sc.current_bias
    if sc.voltage_noise_sigma > 0:
        v = v + v_rng.normal(0.0, sc.voltage_noise_sigma, n)
    if sc.current_noise_sigma > 0:
        i = i + i_rng.normal(0.0, sc.current_noise_sigma, n)
    return Measurements(voltage=v, current=i)


def rmse(series_a, series_b, window=None) -> float:
    """Root-mean-square difference over ``window`` (slice, mask or indices)."""
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series are not aligned")
    if window is not None:
        a, b = a[window], b[window]
    if a.size == 0:
        raise ValueError("empty RMSE window")
    return float(np.sqrt(np.mean((a - b) ** 2)))


TRACE_COLUMNS = ("t", "soc_true", "soc_est", "v_true", "v_meas", "v_est",
                 "bias_true", "bias_est", "p_soc", "p_bias")


@dataclass
class ScenarioResult:
    scenario: Scenario
    t: np.ndarray
    true_states: np.ndarray
    v_true: np.ndarray
    v_meas: np.ndarray
    i_meas: np.ndarray
    estimates: np.ndarray  # NaN before the filter starts
    v_est: np.ndarray
    cov_diag: np.ndarray
    bias_true: np.ndarray
    bias_est: np.ndarray
    saturated: np.ndarray
    failed: bool = False
    failure: str = ""
    metrics: dict = field(default_factory=dict)

    @property
    def soc_rmse(self) -> float:
        return self.metrics["soc_rmse"]

    @property
    def bias_rmse(self) -> float:
        return self.metrics["bias_rmse"]

    def trace_rows(self):
        n = len(self.t)
        p_soc = self.cov_diag[:, 2]
        bias_idx = _reported_bias_index(self.scenario)
        p_bias = self.cov_diag[:, bias_idx] if bias_idx is not None else np.full(n, np.nan)
        cols = (self.t, self.true_states[:, 2], self.estimates[:, 2], self.v_true, self.v_meas,
                self.v_est, self.bias_true, self.bias_est, p_soc, p_bias)
        for k in range(n):
            yield tuple(float(c[k]) for c in cols)

    def report(self) -> str:
        lines = [f"scenario: {self.scenario.name}",
                 f"model: {self.scenario.model_variant}",
                 f"filter: {self.scenario.filter_kind}",
                 f"seed: {self.scenario.seed}",
                 f"window: {self.scenario.eval_window[0]:g}-{self.scenario.eval_window[1]:g} s"]
        for key in ("soc_rmse", "bias_rmse", "soc_max_error", "bias_max_error", "window_samples", "saturation_events"):
            lines.append(f"{key}: {_fmt(self.metrics.get(key))}")
        lines.append(f"status: {'FAILED ' + self.failure if self.failed else 'ok'}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _reported_bias_index(sc: Scenario) -> int | None:
    labels = build_model(sc.model_variant, sc.params, sc.ocv).state_labels
    if "ve" in labels and (sc.voltage_bias != 0 or "ie" not in labels):
        return labels.index("ve")
    if "ie" in labels:
        return labels.index("ie")
    return None


def _true_bias(sc: Scenario) -> float:
    labels = build_model(sc.model_variant, sc.params, sc.ocv).state_labels
    idx = _reported_bias_index(sc)
    if idx is not None:
        return sc.voltage_bias if labels[idx] == "ve" else sc.current_bias
    return sc.voltage_bias if sc.voltage_bias != 0 else sc.current_bias


def run_scenario(sc: Scenario) -> ScenarioResult:
    """Simulate truth over the whole cycle, run the filter from the start of
    the evaluation window and score the a posteriori estimates."""
    dt = sc.cycle.dt
    truth = simulate(sc.params, sc.ocv, sc.true_initial, sc.cycle.current, dt)
    meas = make_measurements(sc, truth)
    m = build_model(sc.model_variant, sc.params, sc.ocv)
    cfg = sc.config if sc.config.dt == dt else replace(sc.config, dt=dt)
    update = UPDATES[sc.filter_kind]
    n_steps, n = len(truth.t), m.state_dim
    est = np.full((n_steps, n), np.nan)
    cov_diag = np.full((n_steps, n), np.nan)
    v_est = np.full(n_steps, np.nan)
    k0 = int(round(sc.eval_window[0] / dt))
    k1 = int(round(sc.eval_window[1] / dt))

    failed, failure = False, ""
    state = FilterState.initial(sc.estimator_initial, cfg)
    done = k0
    for k in range(k0, n_steps):
        try:
            if k > k0:
                state = predict(m, cfg, state, meas.current[k - 1])
            state = update(m, cfg, state, meas.voltage[k], meas.current[k])
            if not np.all(np.isfinite(state.mean)):
                raise FilterDivergence("non-finite state estimate")
        except (FilterDivergence, np.linalg.LinAlgError) as exc:
            failed, failure = True, f"at t={truth.t[k]:g}: {exc}"
            log.warning("scenario %s failed %s", sc.name, failure)
            break
        est[k] = state.mean
        cov_diag[k] = np.diag(state.covariance)
        v_est[k] = m.measurement(state.mean, meas.current[k])
        done = k + 1

    bias_idx = _reported_bias_index(sc)
    bias_true = np.full(n_steps, _true_bias(sc))
    bias_est = est[:, bias_idx] if bias_idx is not None else np.full(n_steps, np.nan)

    window = slice(k0, min(k1, done))
    metrics = {"window_samples": max(0, min(k1, done) - k0),
               "saturation_events": truth.saturation_events}
    if metrics["window_samples"]:
        soc_err = est[window, 2] - truth.soc[window]
        metrics["soc_rmse"] = rmse(est[:, 2], truth.soc, window)
        metrics["soc_max_error"] = float(np.max(np.abs(soc_err)))
        if bias_idx is not None:
            metrics["bias_rmse"] = rmse(bias_est, bias_true, window)
            metrics["bias_max_error"] = float(np.max(np.abs(bias_est[window] - bias_true[window])))
        else:
            metrics["bias_rmse"] = metrics["bias_max_error"] = math.nan
    else:
        metrics.update(soc_rmse=math.nan, soc_max_error=math.nan, bias_rmse=math.nan, bias_max_error=math.nan)

    return ScenarioResult(
        scenario=sc, t=truth.t, true_states=truth.states, v_true=truth.voltage,
        v_meas=meas.voltage, i_meas=meas.current, estimates=est, v_est=v_est,
        cov_diag=cov_diag, bias_true=bias_true, bias_est=bias_est,
        saturated=truth.saturated, failed=failed, failure=failure, metrics=metrics,
    )


def run_batch(scenarios, max_workers: int | None = None) -> list[ScenarioResult]:
    """Run independent scenarios concurrently; results keep input order."""
    scenarios = list(scenarios)
    if max_workers == 1 or len(scenarios) < 2:
        return [run_scenario(sc) for sc in scenarios]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run_scenario, scenarios))


# -- trace CSV ----------------------------------------------------------------


def write_trace_csv(result: ScenarioResult, out) -> None:
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            write_trace_csv(result, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in result.trace_rows():
        w.writerow([repr(v) for v in row])


def trace_csv_text(result: ScenarioResult) -> str:
    buf = io.StringIO()
    write_trace_csv(result, buf)
    return buf.getvalue()


def read_trace_csv(src) -> dict[str, np.ndarray]:
    if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__"):
        with open(src, newline="") as fh:
            return read_trace_csv(fh)
    reader = csv.reader(src)
    header = tuple(next(reader))
    if header != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    return {name: data[:, j] for j, name in enumerate(header)}


# -- built-in scenarios ----------------------------------------------------------------

NAMED_SCENARIOS = (
    "paper-fig4",
    "paper-fig5-ekf1",
    "paper-fig5-ekf2",
    "paper-fig5-ukf",
    "paper-current-bias-ekf1",
    "paper-current-bias-ukf",
)


def reference_cycle(seed: int = 0, duration: float = 2000.0) -> DriveCycle:
    return synthesize_cycle("udc-like", duration, seed=seed)


def voltage_bias_scenario(
    filter_kind: str,
    seed: int = 7,
    model_variant: str = "voltage-bias",
    voltage_bias: float = 0.1,
    initial_soc: float = 0.95,
    cycle: DriveCycle | None = None,
) -> Scenario:
    n = build_model(model_variant, KOKAM_PARAMS, KOKAM_OCV).state_dim
    guess = [0.0, 0.0, initial_soc] + [0.0] * (n - 3)
    return Scenario(
        name=f"voltage-bias-{model_variant}-{filter_kind}",
        cycle=cycle or reference_cycle(),
        model_variant=model_variant,
        filter_kind=filter_kind,
        config=FilterConfig.reference_tuning(n),
        estimator_initial=tuple(guess),
        voltage_bias=voltage_bias,
        seed=seed,
    )


def current_bias_scenario(
    filter_kind: str,
    seed: int = 7,
    model_variant: str = "current-bias",
    current_bias: float = -0.1,
    initial_soc: float = 0.95,
    cycle: DriveCycle | None = None,
) -> Scenario:
    n = build_model(model_variant, KOKAM_PARAMS, KOKAM_OCV).state_dim
    guess = [0.0, 0.0, initial_soc] + [0.0] * (n - 3)
    return Scenario(
        name=f"current-bias-{model_variant}-{filter_kind}",
        cycle=cycle or reference_cycle(),
        model_variant=model_variant,
        filter_kind=filter_kind,
        config=FilterConfig.reference_tuning(n),
        estimator_initial=tuple(guess),
        current_bias=current_bias,
        seed=seed,
    )


def named_scenario(name: str, seed: int = 7) -> Scenario:
    if name == "paper-fig4":
        sc = voltage_bias_scenario("ekf1", seed, model_variant="original")
    elif name.startswith("paper-fig5-"):
        sc = voltage_bias_scenario(name.removeprefix("paper-fig5-"), seed)
    elif name == "paper-current-bias-ekf1":
        sc = current_bias_scenario("ekf1", seed, model_variant="original")
    elif name == "paper-current-bias-ukf":
        sc = current_bias_scenario("ukf", seed)
    else:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(NAMED_SCENARIOS)}")
    return replace(sc, name=name)
