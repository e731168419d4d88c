"""Flat dotted-key configuration for the command line tools.

Grammar, by example::

    # comment
    study.n = 800
    study.methods = oracle, logistic, cbps
    sdr.bandwidth = none

One ``section.key = value`` assignment per line; blank lines and lines whose
first non-space character is ``#`` are ignored.  Every key is declared below
with a type (integer, real, name, name list, or optional variants where the
literal ``none`` means absent); unknown keys, duplicate keys, and ill-typed
values are errors.  The resolved snapshot written next to every run's
artifacts uses the same grammar with all defaults materialized, so a run is
reproducible from its snapshot alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Optional

from .boost import BcartConfig
from .errors import ConfigError
from .simulate import CBPS_TERMS, OUTCOME_TERMS, StudyDesign

__all__ = ["StudyConfig", "parse_config_text", "load_config", "resolved_text"]

_BCART_DEFAULTS = BcartConfig()


@dataclass(frozen=True)
class StudyConfig:
    """Typed view of one configuration file.

    Field names map to dotted keys by replacing the first underscore with a
    dot (``study_n`` is ``study.n``).  ``None`` in a required slot means the
    key was absent; commands that need it reject the config by name.
    """

    study_n: Optional[int] = None
    study_replications: Optional[int] = None
    study_methods: tuple = ()
    study_estimands: tuple = ("ate",)
    study_estimators: tuple = ("ipw",)
    study_scatter_rep: Optional[int] = 0
    seeds_coefficient: Optional[int] = None
    seeds_data: int = 11
    seeds_method: int = 13
    seeds_oracle: int = 17
    oracle_n: int = 1_000_000
    runtime_workers: Optional[int] = None
    bcart_depth: int = _BCART_DEFAULTS.depth
    bcart_shrinkage: float = _BCART_DEFAULTS.shrinkage
    bcart_max_iter: int = _BCART_DEFAULTS.max_iter
    bcart_bag_fraction: float = _BCART_DEFAULTS.bag_fraction
    bcart_ks_stride: int = _BCART_DEFAULTS.ks_stride
    bcart_min_leaf: int = _BCART_DEFAULTS.min_leaf
    sdr_q: int = 2
    sdr_bandwidth: Optional[float] = None
    outcome_terms: tuple = OUTCOME_TERMS
    outcome_family: str = "auto"
    balance_terms: tuple = CBPS_TERMS
    output_dir: str = "out"

    def workers(self) -> int:
        """Effective worker count: the configured value or machine parallelism."""
        if self.runtime_workers is not None:
            return self.runtime_workers
        return os.cpu_count() or 1

    def bcart(self) -> BcartConfig:
        return BcartConfig(
            depth=self.bcart_depth,
            shrinkage=self.bcart_shrinkage,
            max_iter=self.bcart_max_iter,
            bag_fraction=self.bcart_bag_fraction,
            ks_stride=self.bcart_ks_stride,
            min_leaf=self.bcart_min_leaf,
        )

    def require(self, *field_names: str) -> None:
        """Reject the config if any named field is still unset.

        Raises:
            ConfigError: naming the first missing dotted key.
        """
        for name in field_names:
            value = getattr(self, name)
            if value is None or value == ():
                raise ConfigError(f"missing required key {_dotted(name)!r}")

    def to_design(self) -> StudyDesign:
        """Build the study plan for ``run_study`` from this config.

        Raises:
            ConfigError: a key the study needs is missing.
        """
        self.require(
            "study_n", "study_replications", "study_methods", "seeds_coefficient"
        )
        return StudyDesign(
            n=self.study_n,
            replications=self.study_replications,
            ps_methods=self.study_methods,
            estimands=self.study_estimands,
            estimators=self.study_estimators,
            coefficient_seed=self.seeds_coefficient,
            data_seed=self.seeds_data,
            method_seed=self.seeds_method,
            oracle_seed=self.seeds_oracle,
            oracle_n=self.oracle_n,
            outcome_terms=self.outcome_terms,
            outcome_family=self.outcome_family,
            scatter_rep=self.study_scatter_rep,
            workers=self.workers(),
            bcart=self.bcart(),
            sdr_q=self.sdr_q,
            sdr_bandwidth=self.sdr_bandwidth,
        )


def _dotted(field_name: str) -> str:
    return field_name.replace("_", ".", 1)


# key kind per field: how the raw string is typed
_KINDS = {
    "study_n": "int",
    "study_replications": "int",
    "study_methods": "names",
    "study_estimands": "names",
    "study_estimators": "names",
    "study_scatter_rep": "int",
    "seeds_coefficient": "int",
    "seeds_data": "int",
    "seeds_method": "int",
    "seeds_oracle": "int",
    "oracle_n": "int",
    "runtime_workers": "opt_int",
    "bcart_depth": "int",
    "bcart_shrinkage": "float",
    "bcart_max_iter": "int",
    "bcart_bag_fraction": "float",
    "bcart_ks_stride": "int",
    "bcart_min_leaf": "int",
    "sdr_q": "int",
    "sdr_bandwidth": "opt_float",
    "outcome_terms": "names",
    "outcome_family": "name",
    "balance_terms": "names",
    "output_dir": "raw",
}

_FIELDS_BY_KEY = {_dotted(f.name): f.name for f in fields(StudyConfig)}

# keys that may be absent (default None or empty) accept the literal `none`,
# which keeps resolved snapshots of partial configs parseable
_NONE_OK = {f.name for f in fields(StudyConfig) if f.default is None or f.default == ()}


def _convert(key: str, field_name: str, kind: str, text: str):
    value = text.strip()
    if value.lower() == "none" and (field_name in _NONE_OK or kind.startswith("opt_")):
        return () if kind == "names" else None
    try:
        if kind == "int" or kind == "opt_int":
            return int(value)
        if kind == "float" or kind == "opt_float":
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as a number") from None
    if kind == "name":
        if not value:
            raise ConfigError(f"key {key!r}: empty value")
        return value.lower()
    if kind == "names":
        parts = tuple(p.strip().lower() for p in value.split(","))
        if not all(parts):
            raise ConfigError(f"key {key!r}: empty entry in list {value!r}")
        return parts
    return value


def parse_config_text(text: str) -> StudyConfig:
    """Parse configuration text into a typed ``StudyConfig``.

    Args:
        text: file contents in the flat dotted-key grammar.

    Returns:
        Config with defaults filled for absent keys.

    Raises:
        ConfigError: malformed line, unknown key, duplicate key, or a value
            that does not parse as the key's type.
    """
    seen = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key not in _FIELDS_BY_KEY:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        field_name = _FIELDS_BY_KEY[key]
        seen[key] = _convert(key, field_name, _KINDS[field_name], value)
    return StudyConfig(**{_FIELDS_BY_KEY[k]: v for k, v in seen.items()})


def load_config(path) -> StudyConfig:
    """Read and parse a configuration file.

    Raises:
        ConfigError: the file cannot be read or does not parse.
    """
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def _format_value(kind: str, value) -> str:
    if value is None or value == ():
        return "none"
    if kind == "names":
        return ", ".join(value)
    if kind == "float" or kind == "opt_float":
        return repr(float(value))
    return str(value)


def resolved_text(config: StudyConfig) -> str:
    """Render the fully resolved config in the same grammar.

    Every key appears once, defaults included, with the effective worker
    count materialized; parsing the result reproduces the config exactly.
    """
    lines = ["# resolved configuration"]
    for key in sorted(_FIELDS_BY_KEY):
        field_name = _FIELDS_BY_KEY[key]
        value = getattr(config, field_name)
        if field_name == "runtime_workers":
            value = config.workers()
        lines.append(f"{key} = {_format_value(_KINDS[field_name], value)}")
    return "\n".join(lines) + "\n"
