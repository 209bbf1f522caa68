"""``bmsobs`` command line.

Exit codes: 0 ok, 2 expectation failed, 64 usage, 65 bad config, 66 missing input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from .augmented import VARIANTS, build_model
from .config import ConfigError, load_config
from .ecm import KOKAM_OCV, KOKAM_PARAMS
from .filters import FilterConfig
from .harness import (
    FILTER_KINDS,
    NAMED_SCENARIOS,
    Scenario,
    ScenarioResult,
    named_scenario,
    run_batch,
    run_scenario,
    trace_csv_text,
)
from .observability import DEFAULT_ILL_CONDITIONED, DEFAULT_REL_TOL, condition_sweep, grid, sweep_to_csv_text

EXIT_OK = 0
EXIT_EXPECTATION = 2
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_NOINPUT = 66

DEFAULT_SEED = 7
DEFAULT_GRID = "0.1:1.0:0.05"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get("BMSOBS_DEFAULT_SEED")
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BMSOBS_DEFAULT_SEED must be an integer, got {raw!r}") from None


def parse_grid(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
        return grid(start, stop, step)
    except ValueError as exc:
        raise UsageError(f"bad --grid {spec!r}: expected start:stop:step ({exc})") from None


def _write_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _check_out_dir(path) -> None:
    if path is not None and not Path(path).parent.resolve().is_dir():
        raise UsageError(f"output directory for {path} does not exist")


def _emit(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        _write_atomic(path, text)


# -- observability --------------------------------------------------------------


def cmd_observability(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; expected one of {', '.join(VARIANTS)}")
    _check_out_dir(args.out)
    params = KOKAM_PARAMS
    if args.tau_equal:
        params = replace(params, c2=params.tau1 / params.r2)
    rows = condition_sweep(
        args.variant, params, KOKAM_OCV, parse_grid(args.grid),
        max_order=args.max_order, rel_tol=args.rel_tol, ill_conditioned=args.ill_conditioned,
    )
    _emit(sweep_to_csv_text(rows), args.out)
    verdicts = [r.verdict for r in rows]
    summary = ", ".join(f"{v}: {verdicts.count(v)}" for v in sorted(set(verdicts)))
    print(f"{args.variant}: {len(rows)} grid points ({summary})", file=sys.stderr)
    if args.expect_observable and "rank-deficient" in verdicts:
        print("expectation failed: rank-deficient grid points present", file=sys.stderr)
        return EXIT_EXPECTATION
    return EXIT_OK


# -- scenario -------------------------------------------------------------------


def _with_overrides(sc: Scenario, variant: str | None, filter_kind: str | None) -> Scenario:
    if filter_kind is not None:
        sc = replace(sc, filter_kind=filter_kind)
    if variant is not None and variant != sc.model_variant:
        n = build_model(variant, sc.params, sc.ocv).state_dim
        cfg = FilterConfig.reference_tuning(n, kappa=sc.config.kappa, dt=sc.config.dt)
        cfg = replace(cfg, r=sc.config.r)
        guess = tuple(sc.estimator_initial[:3]) + (0.0,) * (n - 3)
        sc = replace(sc, model_variant=variant, config=cfg, estimator_initial=guess)
    return sc


def _load_scenario(args) -> tuple[Scenario, str | None, str | None]:
    seed = args.seed if args.seed is not None else None
    trace_out, report_out = args.out, args.report
    if args.config is not None:
        if args.name is not None:
            raise UsageError("give a scenario name or --config, not both")
        try:
            cfg = load_config(args.config)
        except FileNotFoundError:
            raise FileNotFoundError(args.config) from None
        if seed is None and cfg.get("scenario.seed") is None:
            seed = default_seed()
        sc = cfg.to_scenario(seed)
        trace_out = trace_out or cfg.get("output.trace")
        report_out = report_out or cfg.get("output.report")
    else:
        if args.name is None:
            raise UsageError("a scenario name or --config is required")
        if args.name not in NAMED_SCENARIOS:
            raise UsageError(f"unknown scenario {args.name!r}; known: {', '.join(NAMED_SCENARIOS)}")
        sc = named_scenario(args.name, default_seed() if seed is None else seed)
    try:
        sc = _with_overrides(sc, args.variant, args.filter)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return sc, trace_out, report_out


def cmd_scenario(args) -> int:
    sc, trace_out, report_out = _load_scenario(args)
    _check_out_dir(trace_out)
    _check_out_dir(report_out)
    result = run_scenario(sc)
    if trace_out is not None:
        _emit(trace_csv_text(result), trace_out)
    report = result.report()
    if report_out is not None and str(report_out) != "-":
        _write_atomic(report_out, report)
    sys.stdout.write(report)
    return EXIT_OK


# -- compare --------------------------------------------------------------------

# expected ranking, best first
EXPECTED_ORDER = ("ukf", "ekf2", "ekf1")


def ranking_table(results: list[ScenarioResult]) -> str:
    order = sorted(range(len(results)), key=lambda i: (results[i].soc_rmse, i))
    lines = [f"{'rank':<5}{'scenario':<28}{'model':<14}{'filter':<7}{'soc_rmse':>12}{'bias_rmse':>12}"]
    for pos, i in enumerate(order, start=1):
        r = results[i]
        sc = r.scenario
        lines.append(f"{pos:<5}{sc.name:<28}{sc.model_variant:<14}{sc.filter_kind:<7}"
                     f"{r.soc_rmse:>12.6g}{r.bias_rmse:>12.6g}")
    return "\n".join(lines) + "\n"


def ordering_check(results: list[ScenarioResult]) -> tuple[bool, str] | None:
    """Check soc_rmse(ukf) <= soc_rmse(ekf2) <= soc_rmse(ekf1) for whichever
    of those filters are present on one shared model variant."""
    by_kind = {}
    for r in results:
        by_kind.setdefault(r.scenario.filter_kind, []).append(r)
    present = [k for k in EXPECTED_ORDER if len(by_kind.get(k, ())) == 1]
    if len(present) < 2 or len({by_kind[k][0].scenario.model_variant for k in present}) != 1:
        return None
    values = [by_kind[k][0].soc_rmse for k in present]
    holds = all(a <= b for a, b in zip(values, values[1:]))
    desc = " <= ".join(present)
    detail = ", ".join(f"{k}={v:.6g}" for k, v in zip(present, values))
    return holds, f"ordering {desc}: {'holds' if holds else 'VIOLATED'} ({detail})"


def cmd_compare(args) -> int:
    if len(args.names) < 2:
        raise UsageError("compare needs at least two scenarios")
    for name in args.names:
        if name not in NAMED_SCENARIOS:
            raise UsageError(f"unknown scenario {name!r}; known: {', '.join(NAMED_SCENARIOS)}")
    seed = default_seed() if args.seed is None else args.seed
    scenarios = [named_scenario(n, seed) for n in args.names]
    first = scenarios[0]
    for sc in scenarios[1:]:
        if not first.same_experiment(sc):
            raise UsageError(f"{first.name} and {sc.name} differ in more than the estimator")
    _check_out_dir(args.out)
    results = run_batch(scenarios)
    text = ranking_table(results)
    check = ordering_check(results)
    status = EXIT_OK
    if check is not None:
        text += check[1] + "\n"
        if not check[0]:
            status = EXIT_EXPECTATION
    if args.out is not None:
        _write_atomic(args.out, text)
    sys.stdout.write(text)
    return status


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bmsobs", description="Battery SOC observability and bias-estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("observability", help="rank/conditioning sweep over SOC")
    p.add_argument("--variant", default="voltage-bias", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--grid", default=DEFAULT_GRID, help="SOC grid start:stop:step (inclusive)")
    p.add_argument("--out", help="sweep CSV path (default stdout)")
    p.add_argument("--expect-observable", action="store_true",
                   help="exit 2 if any grid point is rank-deficient")
    p.add_argument("--tau-equal", action="store_true", help="force tau2 = tau1 by changing c2")
    p.add_argument("--max-order", type=int, default=None, help="highest Lie order (default: OCV degree)")
    p.add_argument("--rel-tol", type=float, default=DEFAULT_REL_TOL)
    p.add_argument("--ill-conditioned", type=float, default=DEFAULT_ILL_CONDITIONED)
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("scenario", help="run one estimation scenario")
    p.add_argument("name", nargs="?", help=f"one of {', '.join(NAMED_SCENARIOS)}")
    p.add_argument("--config", help="run configuration file (dotted key = value)")
    p.add_argument("--seed", type=int, help="noise seed (default $BMSOBS_DEFAULT_SEED or 7)")
    p.add_argument("--out", help="trace CSV path")
    p.add_argument("--report", help="also write the summary report here")
    p.add_argument("--variant", choices=VARIANTS, help="override the estimator model")
    p.add_argument("--filter", choices=FILTER_KINDS, help="override the filter")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("compare", help="rank scenarios that share truth and measurements")
    p.add_argument("names", nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="ranking report path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or argparse usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bmsobs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"bmsobs: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"bmsobs: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_NOINPUT


if __name__ == "__main__":
    sys.exit(main())
