"""Flat ``dotted.key = value`` run configuration.

Example::

    # voltage-bias run with a lighter UKF spread
    scenario.base = paper-fig5-ukf
    scenario.filter.kappa = 2
    scenario.voltage_bias = -0.1        # V
    scenario.estimator_initial = 0, 0, 0.75, 0
    output.trace = trace.csv

Lists are comma separated. Every key is optional; unset keys keep the
values of ``scenario.base`` (default ``paper-fig5-ukf``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augmented import VARIANTS, build_model
from .ecm import ECMParams
from .filters import FilterConfig
from .harness import CYCLE_KINDS, FILTER_KINDS, NAMED_SCENARIOS, Scenario, named_scenario, synthesize_cycle


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _float(text):
    return float(text)


def _int(text):
    return int(text)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, unit)
SCHEMA = {
    "scenario.base": (_choice(NAMED_SCENARIOS), ""),
    "scenario.name": (str, ""),
    "scenario.seed": (_int, ""),
    "scenario.model_variant": (_choice(VARIANTS), ""),
    "scenario.true_initial": (_floats, "V, V, -"),
    "scenario.estimator_initial": (_floats, "V, V, -, bias units"),
    "scenario.voltage_bias": (_float, "V"),
    "scenario.current_bias": (_float, "A"),
    "scenario.voltage_noise_sigma": (_float, "V"),
    "scenario.current_noise_sigma": (_float, "A"),
    "scenario.eval_window": (_floats, "s"),
    "scenario.filter.kind": (_choice(FILTER_KINDS), ""),
    "scenario.filter.kappa": (_float, "-"),
    "scenario.filter.p0": (_floats, "diagonal, state units squared"),
    "scenario.filter.q0": (_floats, "diagonal, state units squared"),
    "scenario.filter.r": (_float, "V^2"),
    "scenario.filter.dt": (_float, "s"),
    "scenario.cycle.kind": (_choice(CYCLE_KINDS), ""),
    "scenario.cycle.duration": (_float, "s"),
    "scenario.cycle.seed": (_int, ""),
    "scenario.cycle.c_rate_cap": (_float, "1/h"),
    "scenario.cycle.mean_c_rate": (_float, "1/h"),
    "params.r1": (_float, "ohm"),
    "params.r2": (_float, "ohm"),
    "params.c1": (_float, "F"),
    "params.c2": (_float, "F"),
    "params.rs": (_float, "ohm"),
    "params.capacity_q": (_float, "A*s"),
    "output.trace": (str, "path"),
    "output.report": (str, "path"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_scenario(self, seed: int | None = None) -> Scenario:
        v = self.values
        try:
            return self._build(v, seed)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def _build(self, v, seed):
        if seed is None:
            seed = v.get("scenario.seed", 7)
        sc = named_scenario(v.get("scenario.base", "paper-fig5-ukf"), seed)

        params = sc.params
        pkeys = {k.split(".", 1)[1]: val for k, val in v.items() if k.startswith("params.")}
        if pkeys:
            params = replace(params, **pkeys)

        cycle = sc.cycle
        ckeys = {k: v[k] for k in v if k.startswith("scenario.cycle.")}
        if ckeys:
            cycle = synthesize_cycle(
                v.get("scenario.cycle.kind", cycle.label),
                v.get("scenario.cycle.duration", cycle.duration),
                seed=v.get("scenario.cycle.seed", cycle.seed),
                c_rate_cap=v.get("scenario.cycle.c_rate_cap", 3.0),
                capacity_q=params.capacity_q,
                **({"mean_c_rate": v["scenario.cycle.mean_c_rate"]} if "scenario.cycle.mean_c_rate" in v else {}),
            )

        variant = v.get("scenario.model_variant", sc.model_variant)
        n = build_model(variant, params, sc.ocv).state_dim
        cfg = sc.config if variant == sc.model_variant else FilterConfig.reference_tuning(n)
        p0 = np.diag(v["scenario.filter.p0"]) if "scenario.filter.p0" in v else cfg.p0
        q0 = np.diag(v["scenario.filter.q0"]) if "scenario.filter.q0" in v else cfg.q0
        cfg = FilterConfig(
            p0=p0, q0=q0,
            r=v.get("scenario.filter.r", cfg.r),
            kappa=v.get("scenario.filter.kappa", cfg.kappa),
            dt=v.get("scenario.filter.dt", cfg.dt),
        )
        guess = v.get("scenario.estimator_initial")
        if guess is None:
            guess = tuple(sc.estimator_initial[:3]) + (0.0,) * (n - 3)

        window = v.get("scenario.eval_window", sc.eval_window)
        if len(window) != 2:
            raise ConfigError("needs two values: start, end", key="scenario.eval_window")
        true_initial = v.get("scenario.true_initial", sc.true_initial)
        if len(true_initial) != 3:
            raise ConfigError("needs three values: v1, v2, z", key="scenario.true_initial")

        return Scenario(
            name=v.get("scenario.name", "custom"),
            cycle=cycle,
            model_variant=variant,
            filter_kind=v.get("scenario.filter.kind", sc.filter_kind),
            config=cfg,
            estimator_initial=tuple(guess),
            true_initial=tuple(true_initial),
            params=params,
            ocv=sc.ocv,
            voltage_bias=v.get("scenario.voltage_bias", sc.voltage_bias),
            current_bias=v.get("scenario.current_bias", sc.current_bias),
            voltage_noise_sigma=v.get("scenario.voltage_noise_sigma", sc.voltage_noise_sigma),
            current_noise_sigma=v.get("scenario.current_noise_sigma", sc.current_noise_sigma),
            eval_window=tuple(window),
            seed=seed,
        )


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", line=lineno, key=key)
        if key in cfg.values:
            raise ConfigError(f"duplicate key (first set on line {cfg.lines[key]})", line=lineno, key=key)
        parser, _unit = SCHEMA[key]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", line=lineno, key=key) from None
        cfg.lines[key] = lineno
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
