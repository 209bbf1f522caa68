import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmsobs import harness
from bmsobs.ecm import KOKAM_PARAMS, simulate
from bmsobs.filters import FilterConfig, FilterDivergence
from bmsobs.harness import (
    CYCLE_KINDS,
    NAMED_SCENARIOS,
    TRACE_COLUMNS,
    make_measurements,
    named_scenario,
    read_trace_csv,
    rmse,
    run_batch,
    run_scenario,
    synthesize_cycle,
    trace_csv_text,
    voltage_bias_scenario,
    write_trace_csv,
)

SEEDS = range(10)


# -- rmse ------------------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 3, 4], [0, 0, 0]) == pytest.approx(math.sqrt(25 / 3))
    assert rmse(np.arange(10), np.zeros(10), slice(2, 4)) == pytest.approx(math.sqrt(6.5))
    with pytest.raises(ValueError, match="empty"):
        rmse([1, 2], [1, 2], slice(5, 5))
    with pytest.raises(ValueError):
        rmse([1, 2], [1, 2, 3])


@settings(max_examples=50)
@given(c=st.floats(-1e3, 1e3), values=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_rmse_constant_offset(c, values):
    a = np.array(values)
    assert rmse(a + c, a) == pytest.approx(abs(c), rel=1e-9, abs=1e-9)


# -- drive cycles ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", CYCLE_KINDS)
def test_cycles_are_deterministic_and_capped(kind):
    a = synthesize_cycle(kind, 1500, seed=3)
    b = synthesize_cycle(kind, 1500, seed=3)
    np.testing.assert_array_equal(a.current, b.current)
    assert len(a.current) == 1500 and a.dt == 1.0 and a.duration == 1500.0
    assert np.all(np.abs(a.current) <= a.cap + 1e-12)
    assert a.cap == pytest.approx(3 * KOKAM_PARAMS.one_c_current)


@pytest.mark.parametrize("kind", ["udc-like", "fuds-like"])
def test_drive_like_cycle_properties(kind):
    c = synthesize_cycle(kind, 2000, seed=0)
    period = c.current[:1000]
    np.testing.assert_array_equal(c.current[1000:], period)
    assert period.mean() == pytest.approx(0.54 * KOKAM_PARAMS.one_c_current, rel=1e-6)
    assert np.mean(period == 0) > 0.1  # rest segments
    assert np.all(np.cumsum(period) >= -1e-9)  # never above the starting charge
    assert len(np.unique(period)) > 10  # persistently exciting
    if kind == "fuds-like":
        assert period.min() < 0
    else:
        assert period.min() >= 0
    assert not np.array_equal(period, synthesize_cycle(kind, 1000, seed=1).current)


def test_reference_cycle_soc_profile():
    truth = simulate(KOKAM_PARAMS, named_scenario("paper-fig4").ocv, (0, 0, 1.0),
                     harness.reference_cycle().current)
    assert truth.soc[1000] == pytest.approx(0.85, abs=1e-9)
    assert truth.soc[-1] == pytest.approx(0.70, abs=1e-3)


def test_constant_and_rest_cycles():
    np.testing.assert_array_equal(synthesize_cycle("rest", 10).current, np.zeros(10))
    assert np.all(synthesize_cycle("constant", 10, c_rate_cap=1.0).current == KOKAM_PARAMS.one_c_current)
    with pytest.raises(ValueError):
        synthesize_cycle("wltp", 10)
    with pytest.raises(ValueError):
        synthesize_cycle("rest", 0)


# -- measurements and scenarios ------------------------------------------------------------


def test_measurement_streams_independent():
    sc = named_scenario("paper-fig5-ukf")
    truth = simulate(sc.params, sc.ocv, sc.true_initial, sc.cycle.current)
    a = make_measurements(sc, truth)
    b = make_measurements(replace(sc, current_noise_sigma=0.0), truth)
    np.testing.assert_array_equal(a.voltage, b.voltage)
    np.testing.assert_array_equal(b.current, truth.current + sc.current_bias)
    assert np.std(a.voltage - truth.voltage - 0.1) == pytest.approx(6e-3, rel=0.1)
    assert np.mean(a.voltage - truth.voltage) == pytest.approx(0.1, abs=1e-3)


def test_scenario_validation():
    sc = named_scenario("paper-fig5-ekf1")
    with pytest.raises(ValueError):
        replace(sc, filter_kind="pf")
    with pytest.raises(ValueError):
        replace(sc, eval_window=(1000.0, 5000.0))
    with pytest.raises(ValueError):
        replace(sc, estimator_initial=(0, 0, 0.9))


def test_named_scenarios():
    for name in NAMED_SCENARIOS:
        assert named_scenario(name).name == name
    with pytest.raises(KeyError):
        named_scenario("paper-fig9")
    a, b = named_scenario("paper-fig5-ekf1"), named_scenario("paper-fig5-ukf")
    assert a.differs_only_in_filter(b) and a.same_experiment(b)
    c, d = named_scenario("paper-current-bias-ekf1"), named_scenario("paper-current-bias-ukf")
    assert c.same_experiment(d) and not c.differs_only_in_filter(d)
    assert not a.same_experiment(c)
    assert not a.same_experiment(named_scenario("paper-fig5-ukf", seed=8))


@pytest.mark.parametrize("kind", ["ekf1", "ekf2", "ukf"])
@pytest.mark.parametrize("variant", ["original", "voltage-bias", "current-bias"])
def test_perfect_information(kind, variant):
    sc = voltage_bias_scenario(kind, model_variant=variant, voltage_bias=0.0)
    n = len(sc.estimator_initial)
    truth = simulate(sc.params, sc.ocv, sc.true_initial, sc.cycle.current)
    exact = tuple(truth.states[1000]) + (0.0,) * (n - 3)
    sc = replace(sc, voltage_noise_sigma=0.0, current_noise_sigma=0.0, estimator_initial=exact,
                 config=FilterConfig(1e-10 * np.eye(n), 1e-14 * np.eye(n), 3.6e-5))
    res = run_scenario(sc)
    assert res.soc_rmse <= 1e-6
    assert not res.failed


def test_run_is_reproducible():
    a = run_scenario(named_scenario("paper-fig5-ekf2", seed=3))
    b = run_scenario(named_scenario("paper-fig5-ekf2", seed=3))
    assert trace_csv_text(a) == trace_csv_text(b)
    assert a.metrics == b.metrics
    c = run_scenario(named_scenario("paper-fig5-ekf2", seed=4))
    assert c.soc_rmse != a.soc_rmse


def test_result_layout():
    res = run_scenario(named_scenario("paper-fig5-ukf"))
    assert res.metrics["window_samples"] == 1000
    assert np.all(np.isnan(res.estimates[:1000]))
    assert np.all(np.isfinite(res.estimates[1000:]))
    manual = math.sqrt(np.mean((res.estimates[1000:2000, 2] - res.true_states[1000:2000, 2]) ** 2))
    assert res.soc_rmse == pytest.approx(manual, rel=1e-12)
    assert res.bias_rmse == pytest.approx(rmse(res.estimates[:, 3], np.full(2000, 0.1), slice(1000, 2000)))
    report = res.report()
    for key in ("soc_rmse", "bias_rmse", "soc_max_error", "bias_max_error", "status: ok"):
        assert key in report


def test_filter_breakdown_is_recorded(monkeypatch):
    real = harness.UPDATES["ekf1"]
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] > 300:
            raise FilterDivergence("boom")
        return real(*args)

    monkeypatch.setitem(harness.UPDATES, "ekf1", flaky)
    res = run_scenario(named_scenario("paper-fig5-ekf1"))
    assert res.failed and "boom" in res.failure
    assert res.metrics["window_samples"] == 300
    assert math.isfinite(res.soc_rmse)
    assert np.all(np.isnan(res.estimates[1300:]))
    assert "FAILED" in res.report()


def test_batch_matches_serial_in_order():
    scs = [named_scenario(n, seed=2) for n in ("paper-fig5-ukf", "paper-fig4", "paper-fig5-ekf2")]
    batch = run_batch(scs)
    assert [r.scenario.name for r in batch] == [s.name for s in scs]
    for r, sc in zip(batch, scs):
        assert r.metrics == run_scenario(sc).metrics


def test_trace_csv_round_trip(tmp_path):
    res = run_scenario(named_scenario("paper-current-bias-ukf"))
    path = tmp_path / "trace.csv"
    write_trace_csv(res, path)
    data = read_trace_csv(path)
    assert tuple(data) == TRACE_COLUMNS
    np.testing.assert_array_equal(data["soc_est"], res.estimates[:, 2])
    np.testing.assert_array_equal(data["v_meas"], res.v_meas)
    np.testing.assert_array_equal(data["bias_true"], np.full(2000, -0.1))
    with pytest.raises(ValueError):
        read_trace_csv(io.StringIO("a,b\n1,2\n"))


# -- seed-averaged properties ------------------------------------------------------------


def _mean_rmse(make):
    return float(np.mean([r.soc_rmse for r in run_batch([make(s) for s in SEEDS])]))


def test_current_bias_hurts_less_than_voltage_bias():
    cb = _mean_rmse(lambda s: named_scenario("paper-current-bias-ekf1", s))
    vb = _mean_rmse(lambda s: named_scenario("paper-fig4", s))
    assert cb < 0.5 * vb


@pytest.mark.xfail(strict=True, reason="EKF2 second-order offset on a large initial "
                   "covariance degrades badly below truth; see decisions ledger")
def test_negative_bias_keeps_filter_ordering():
    def order(bias, guess):
        scores = {k: _mean_rmse(lambda s, k=k: voltage_bias_scenario(k, s, voltage_bias=bias, initial_soc=guess))
                  for k in ("ekf1", "ekf2", "ukf")}
        return sorted(scores, key=scores.get)

    assert order(-0.1, 0.75) == order(0.1, 0.95)
