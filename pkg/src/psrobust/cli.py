"""Command line interface: study execution and real-data estimation.

Subcommands:
  simulate        run a Monte Carlo study from a config file
  estimate        fit configured methods on a dataset CSV and estimate effects
  balance-report  fit configured methods on a dataset CSV (no outcome needed)
                  and report per-term balance residuals

Exit codes: 0 success, 2 configuration problem, 3 data ingestion or
validation problem, 4 unexpected internal failure.  Method failures inside a
run are recorded in the artifacts and do not change the exit code.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from types import SimpleNamespace

from .cbps import BalanceSpec, balance_report
from .config import StudyConfig, load_config, resolved_text
from .data import read_dataset_csv
from .errors import ConfigError, MissingOutcome, PsrobustError, ValidationError
from .estimands import fit_outcome_model
from .simulate import (
    _ESTIMANDS,
    _ESTIMATORS,
    _FMT,
    PS_METHODS,
    _estimate_cell,
    raw_table_text,
    run_study,
    scatter_table_text,
    summary_table_text,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

_ESTIMATES_HEADER = "ps_method,estimand,estimator,estimate,failed,aug_term"
_BALANCE_HEADER = "ps_method,term,residual"

_SEED_FIELDS = {
    "coefficient": "seeds_coefficient",
    "data": "seeds_data",
    "method": "seeds_method",
    "oracle": "seeds_oracle",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psrobust",
        description="Robust propensity scores and weighted treatment effects.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler, needs_data in (
        ("simulate", cmd_simulate, False),
        ("estimate", cmd_estimate, True),
        ("balance-report", cmd_balance_report, True),
    ):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="config file path")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument(
            "--seed-override",
            action="append",
            default=[],
            metavar="NAME=VALUE",
            help="override a seed (coefficient, data, method, oracle); repeatable",
        )
        if needs_data:
            cmd.add_argument("--data", required=True, help="dataset CSV path")
        cmd.set_defaults(handler=handler)
    return parser


def _apply_seed_overrides(config: StudyConfig, overrides) -> StudyConfig:
    updates = {}
    for item in overrides:
        name, sep, value = item.partition("=")
        name = name.strip().lower()
        if name.startswith("seeds."):
            name = name[len("seeds."):]
        if not sep or name not in _SEED_FIELDS:
            raise ConfigError(
                f"bad --seed-override {item!r}; expected NAME=VALUE with NAME "
                f"in {sorted(_SEED_FIELDS)}"
            )
        try:
            updates[_SEED_FIELDS[name]] = int(value)
        except ValueError:
            raise ConfigError(
                f"--seed-override {item!r}: {value!r} is not an integer"
            ) from None
    if not updates:
        return config
    merged = dict(config.__dict__)
    merged.update(updates)
    return StudyConfig(**merged)


def _out_dir(args, config: StudyConfig) -> str:
    out = args.out if args.out is not None else config.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write(out: str, name: str, text: str) -> str:
    path = os.path.join(out, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _truth_text(truth) -> str:
    lines = [
        "# truth manifest (Monte Carlo oracle)",
        f"true.ate = {_FMT % truth.true_ate}",
        f"true.ate_se = {_FMT % truth.ate_se}",
        f"true.ato = {_FMT % truth.true_ato}",
        f"true.ato_se = {_FMT % truth.ato_se}",
        f"oracle.n = {truth.oracle_n}",
        f"oracle.seed = {truth.oracle_seed}",
    ]
    return "\n".join(lines) + "\n"


def cmd_simulate(args, config: StudyConfig) -> int:
    design = config.to_design()
    try:
        result = run_study(design)
    except ValidationError as exc:
        raise ConfigError(f"invalid study design: {exc}") from exc
    out = _out_dir(args, config)
    _write(out, "raw.csv", raw_table_text(result.raw_rows))
    _write(out, "summary.csv", summary_table_text(result.summaries))
    _write(out, "scatter.csv", scatter_table_text(result.scatter_rows))
    _write(out, "truth.txt", _truth_text(result.truth))
    _write(out, "resolved_config.txt", resolved_text(config))
    print(
        f"simulate: {design.replications} replications at n={design.n}, "
        f"{len(result.failures)} recorded failures -> {out}"
    )
    return EXIT_OK


def _estimation_setup(config: StudyConfig):
    """Validate method/estimand names for data commands.

    Raises:
        ConfigError: unknown or unusable names.
    """
    config.require("study_methods")
    for name in config.study_methods:
        if name == "oracle":
            raise ConfigError(
                "method 'oracle' needs simulated data with known propensities"
            )
        if name not in PS_METHODS:
            raise ConfigError(f"unknown method {name!r}; known: {sorted(PS_METHODS)}")
    for estimand in config.study_estimands:
        if estimand not in _ESTIMANDS:
            raise ConfigError(f"unknown estimand {estimand!r}")
    for estimator in config.study_estimators:
        if estimator not in _ESTIMATORS:
            raise ConfigError(f"unknown estimator {estimator!r}")
    pairs = [
        (ed, es)
        for ed in config.study_estimands
        for es in config.study_estimators
        if not (es in ("aipw", "br") and ed != "ato")
    ]
    if not pairs:
        raise ConfigError("no valid (estimand, estimator) pair requested")
    design_ns = SimpleNamespace(
        bcart=config.bcart(),
        sdr_q=config.sdr_q,
        sdr_bandwidth=config.sdr_bandwidth,
        method_seed=config.seeds_method,
    )
    return design_ns, pairs


def _fit_methods(config: StudyConfig, design_ns, data):
    """Fit every configured method once; failures become (name, None, msg)."""
    sample_ns = SimpleNamespace(dataset=data)
    fits = []
    for name in config.study_methods:
        try:
            fits.append((name, PS_METHODS[name](design_ns, sample_ns, 0), ""))
        except Exception as exc:
            fits.append((name, None, f"{type(exc).__name__}: {exc}"))
    return fits


def _balance_rows(config: StudyConfig, data, fits):
    spec = BalanceSpec(moment_terms=config.balance_terms)
    lines = [_BALANCE_HEADER]
    for name, fit, _ in fits:
        if fit is None:
            continue
        for term, value in balance_report(data, fit, spec).items():
            lines.append(f"{name},{term},{_FMT % value}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args, config: StudyConfig) -> int:
    design_ns, pairs = _estimation_setup(config)
    data = _read_data(args.data)
    if not data.has_outcome:
        raise MissingOutcome(
            f"{args.data}: no Y column, but estimation needs outcomes"
        )
    needs_outcome_model = any(es in ("aipw", "br") for _, es in pairs)
    outcome_model = None
    outcome_error = ""
    if needs_outcome_model:
        try:
            outcome_model = fit_outcome_model(
                data, config.outcome_terms, family=config.outcome_family
            )
        except Exception as exc:
            outcome_error = f"{type(exc).__name__}: {exc}"

    fits = _fit_methods(config, design_ns, data)
    lines = [_ESTIMATES_HEADER]
    failures = []
    for name, fit, msg in fits:
        if fit is None:
            failures.append((name, msg))
            for estimand, estimator in pairs:
                lines.append(f"{name},{estimand},{estimator},nan,1,nan")
            continue
        br_cache = {}
        for estimand, estimator in pairs:
            try:
                estimate, aug = _estimate_cell(
                    data, fit, outcome_model, br_cache, estimand, estimator
                )
                if not math.isfinite(estimate):
                    raise ValidationError(f"non-finite estimate {estimate!r}")
                lines.append(
                    f"{name},{estimand},{estimator},"
                    f"{_FMT % estimate},0,{_FMT % aug}"
                )
            except Exception as exc:
                reason = outcome_error or f"{type(exc).__name__}: {exc}"
                failures.append((f"{name}/{estimand}/{estimator}", reason))
                lines.append(f"{name},{estimand},{estimator},nan,1,nan")

    out = _out_dir(args, config)
    _write(out, "estimates.csv", "\n".join(lines) + "\n")
    _write(out, "balance.csv", _balance_rows(config, data, fits))
    _write(out, "resolved_config.txt", resolved_text(config))
    for where, msg in failures:
        print(f"estimate: failed {where}: {msg}", file=sys.stderr)
    print(f"estimate: {data.n_units} units, {len(failures)} failures -> {out}")
    return EXIT_OK


def cmd_balance_report(args, config: StudyConfig) -> int:
    design_ns, _ = _estimation_setup(config)
    data = _read_data(args.data)
    fits = _fit_methods(config, design_ns, data)
    out = _out_dir(args, config)
    _write(out, "balance.csv", _balance_rows(config, data, fits))
    _write(out, "resolved_config.txt", resolved_text(config))
    failed = [(name, msg) for name, fit, msg in fits if fit is None]
    for name, msg in failed:
        print(f"balance-report: failed {name}: {msg}", file=sys.stderr)
    print(f"balance-report: {data.n_units} units, {len(failed)} failures -> {out}")
    return EXIT_OK


class _DataError(Exception):
    """Internal marker: wraps ingestion errors so main can map them to exit 3."""


def _read_data(path):
    try:
        return read_dataset_csv(path)
    except OSError as exc:
        raise _DataError(f"cannot read {path}: {exc}") from None
    except PsrobustError as exc:
        raise _DataError(f"{type(exc).__name__}: {exc}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_seed_overrides(load_config(args.config), args.seed_override)
        return args.handler(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MissingOutcome as exc:
        print(f"data error: MissingOutcome: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
