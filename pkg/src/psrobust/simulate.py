"""Monte Carlo study machinery for the simulation benchmark.

One frozen coefficient draw defines a study: ten covariates with two highly
correlated Bernoulli/normal pairs, a twelve-feature nonlinear propensity
surface, and a heterogeneous outcome with exponential main effects.  On top
of that sit a truth oracle (the ATE is analytically 0.5; the ATO is a Monte
Carlo constant of the draw), a replication runner that fits every configured
propensity method and estimator, and summary bookkeeping in the usual
mean/SD/median/range/bias/RMSE shape.

Failures are data, not exceptions: a method that cannot produce scores on a
replication is recorded in the raw table with ``failed = 1`` and skipped by
the summaries, and the study always runs to completion.  Raw tables are
byte-identical for identical designs regardless of the worker count, because
every replication depends only on its own derived streams and rows are
canonically sorted before export.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .boost import BcartConfig, fit_bcart, predict_bcart
from .cbps import BalanceSpec, fit_cbps, predict_cbps
from .data import Dataset, PropensityFit
from .errors import ValidationError
from .estimands import (
    aipw_ato,
    br_ato,
    fit_br_augmented,
    fit_outcome_model,
    ipw_ate,
    ipw_ato,
)
from .glm import ModelSpec, fit_glm, predict_propensity
from .integrated import (
    fit_candidates,
    fit_integrated,
    fit_ma,
    predict_integrated,
    predict_ma,
)
from .rng import RngStream
from .sdr import fit_sdr

__all__ = [
    "DgpSpec",
    "GeneratedSample",
    "TruthOracle",
    "MonteCarloSummary",
    "RawRecord",
    "ScatterRecord",
    "StudyDesign",
    "StudyResult",
    "generate_dataset",
    "compute_truth",
    "run_study",
    "summarize_rows",
    "estimation_pairs",
    "raw_table_text",
    "scatter_table_text",
    "summary_table_text",
    "PS_METHODS",
]

# Floats in raw exports carry 17 significant digits so a round trip through
# text reproduces every double bit-for-bit.
_FMT = "%.17g"

_RAW_HEADER = "rep,n,ps_method,estimand,estimator,estimate,failed,aug_term"
_SCATTER_HEADER = "unit,T,e_true,e_hat,ps_method"
_SUMMARY_HEADER = (
    "ps_method,estimand,estimator,n_replications,n_failed,"
    "mean,sd,median,min,max,bias,rmse"
)

# Study-time model configurations.  The benchmark keeps these fixed: a main
# effects logistic model in all ten covariates; a balance-fit logistic model
# in the four confounders plus the second-order balance features (and a
# third-order variant); boosted trees and the single-index fit see the four
# confounders (the index model with an intercept column); the integration
# set holds three deliberately wrong candidates.
LOGISTIC_TERMS = ("1",) + tuple(f"x{j}" for j in range(1, 11))
CBPS_TERMS = ("1", "x1", "x2", "x3", "x4", "x2^2", "x4^2")
CBPS_THIRD_TERMS = CBPS_TERMS + ("x2^3", "x4^3", "x1*x2")
CANDIDATE_TERMS = (
    ("1", "x2", "x3", "x4"),
    ("1", "x1", "x2", "x1*x2"),
    ("1", "x2", "x4", "x2*x4"),
)
OUTCOME_TERMS = ("1", "t", "x1", "x2", "x3", "x4", "t*x2")

_N_CONFOUNDERS = 4
_ESTIMANDS = ("ate", "ato")
_ESTIMATORS = ("ipw", "aipw", "br")

# Salt separating the coefficient draw from replication data streams, and
# per-method lanes inside the method-seed stream space (stream id is
# rep * _METHOD_STRIDE + lane, so lanes never collide across methods).
_COEFFICIENT_SALT = 101
_METHOD_STRIDE = 16
_METHOD_LANES = {"bcart": 0, "sdr": 1}


@dataclass(frozen=True)
class DgpSpec:
    """Frozen coefficient draw for one study.

    Attributes:
        beta_t: length-12 propensity coefficients, one per nonlinear
            treatment feature.
        xi_y: length-8 outcome coefficients, one per outcome design column.
        coefficient_seed: seed the draw came from (kept for provenance).
    """

    beta_t: np.ndarray
    xi_y: np.ndarray
    coefficient_seed: int

    def __post_init__(self):
        beta = np.asarray(self.beta_t, dtype=float)
        xi = np.asarray(self.xi_y, dtype=float)
        if beta.shape != (12,):
            raise ValidationError(f"beta_t must have shape (12,), got {beta.shape}")
        if xi.shape != (8,):
            raise ValidationError(f"xi_y must have shape (8,), got {xi.shape}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(xi))):
            raise ValidationError("coefficients must be finite")
        beta.setflags(write=False)
        xi.setflags(write=False)
        object.__setattr__(self, "beta_t", beta)
        object.__setattr__(self, "xi_y", xi)

    @classmethod
    def draw(cls, coefficient_seed: int) -> "DgpSpec":
        """Draw the study coefficients once from the given seed.

        Propensity coefficients are uniform on (-0.8, 0.8) and outcome
        coefficients uniform on (-0.73, 0.73); the draw lives on a salted
        sub-stream so it can never collide with replication data streams.
        """
        g = RngStream(int(coefficient_seed), 0).child(_COEFFICIENT_SALT)
        return cls(
            beta_t=g.uniform(-0.8, 0.8, size=12),
            xi_y=g.uniform(-0.73, 0.73, size=8),
            coefficient_seed=int(coefficient_seed),
        )


@dataclass(frozen=True)
class GeneratedSample:
    """One simulated dataset plus its hidden truth columns.

    The truth columns exist for oracles and diagnostics only; no estimator
    may read them.
    """

    dataset: Dataset
    e_true: np.ndarray
    tau: np.ndarray

    @property
    def n_units(self) -> int:
        return self.dataset.n_units


def _treatment_features(X: np.ndarray) -> np.ndarray:
    """The twelve nonlinear propensity features (no intercept)."""
    x1, x2, x3, x4, x5, x6, x7 = (X[:, j] for j in range(7))
    return np.column_stack(
        [
            X[:, :7],
            x1 * x3,
            x2 * x4,
            x4 * x5,
            x5 * x6,
            x2 ** 2,
        ]
    )


def _outcome_features(X: np.ndarray) -> np.ndarray:
    """The eight outcome design columns (constant, exponentials, tail)."""
    n = X.shape[0]
    return np.column_stack(
        [
            np.ones(n),
            np.exp(X[:, 0]),
            np.exp(X[:, 1]),
            np.exp(X[:, 2]),
            np.exp(1.3 * X[:, 3]),
            X[:, 7],
            X[:, 8],
            X[:, 9],
        ]
    )


def generate_dataset(spec: DgpSpec, n: int, rng: RngStream) -> GeneratedSample:
    """Simulate one replication of the benchmark design.

    Covariates: x1 and x3 are Bernoulli(0.5); x2, x4, x7, x10 are standard
    normal; x5, x6, x8, x9 are Bernoulli with expit-transformed means tied
    to x1, x2, x3, x4, which makes Corr(x2, x6) and Corr(x4, x9) about 0.8
    and Corr(x1, x5) and Corr(x3, x8) about 0.2.  Treatment follows
    expit of the twelve-feature surface; the outcome adds a heterogeneous
    effect ``tau = 0.5 + x2 + x1 x2`` on top of an exponential-form design
    with unit normal noise.

    Args:
        spec: frozen coefficient draw.
        n: number of units, at least 1.
        rng: stream for this replication; the draw order is fixed, so the
            same stream always yields the same sample.

    Returns:
        The dataset together with its hidden truth columns (true scores and
        unit-level effects).

    Raises:
        ValidationError: ``n`` is smaller than 1.
    """
    if n < 1:
        raise ValidationError(f"need n >= 1, got {n}")
    g = rng.generator()
    x1 = (g.random(n) < 0.5).astype(float)
    x3 = (g.random(n) < 0.5).astype(float)
    x2 = g.standard_normal(n)
    x4 = g.standard_normal(n)
    x7 = g.standard_normal(n)
    x10 = g.standard_normal(n)
    x5 = (g.random(n) < expit(0.4 * (x1 - 1.0))).astype(float)
    x6 = (g.random(n) < expit(5.0 * x2)).astype(float)
    x8 = (g.random(n) < expit(0.4 * (x3 - 1.0))).astype(float)
    x9 = (g.random(n) < expit(5.0 * x4)).astype(float)
    X = np.column_stack([x1, x2, x3, x4, x5, x6, x7, x8, x9, x10])

    e_true = expit(_treatment_features(X) @ spec.beta_t)
    t = (g.random(n) < e_true).astype(np.int64)
    tau = 0.5 + x2 + x1 * x2
    y = tau * t + _outcome_features(X) @ spec.xi_y + g.standard_normal(n)

    # Built directly: entries are finite and 0/1 by construction.  A tiny
    # sample can land all units in one arm; that surfaces later, in the
    # methods that need both arms, as their usual typed error.
    data = Dataset(
        treatment=t,
        covariates=X,
        outcome=y,
        column_names=tuple(f"x{j}" for j in range(1, 11)),
    )
    return GeneratedSample(dataset=data, e_true=e_true, tau=tau)


@dataclass(frozen=True)
class TruthOracle:
    """Monte Carlo truth for one coefficient draw.

    ``true_ate`` is analytically 0.5 (the heterogeneous effect has mean
    0.5); the oracle reports the Monte Carlo value with its standard error
    so the analytic value is testable.  ``true_ato`` has no closed form and
    is a constant of the draw.
    """

    true_ate: float
    true_ato: float
    ate_se: float
    ato_se: float
    oracle_n: int
    oracle_seed: int


def compute_truth(spec: DgpSpec, oracle_n: int, rng: RngStream) -> TruthOracle:
    """Estimate the two estimand truths from one large oracle sample.

    Args:
        spec: frozen coefficient draw.
        oracle_n: oracle sample size; 10**6 is the recommended scale.
        rng: stream for the oracle sample.

    Returns:
        The oracle record.  The ATO truth is the overlap-weighted mean of
        the unit effects, ``E[tau e(1-e)] / E[e(1-e)]``, with a linearized
        (ratio delta method) standard error.
    """
    sample = generate_dataset(spec, oracle_n, rng)
    tau, e = sample.tau, sample.e_true
    ate = float(tau.mean())
    ate_se = float(tau.std(ddof=1) / math.sqrt(oracle_n))
    w = e * (1.0 - e)
    wbar = float(w.mean())
    ato = float((w * tau).mean() / wbar)
    influence = w * (tau - ato) / wbar
    ato_se = float(influence.std(ddof=1) / math.sqrt(oracle_n))
    return TruthOracle(
        true_ate=ate,
        true_ato=ato,
        ate_se=ate_se,
        ato_se=ato_se,
        oracle_n=int(oracle_n),
        oracle_seed=int(rng.base_seed),
    )


# ---------------------------------------------------------------------------
# Raw rows, scatter rows, summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawRecord:
    """One (replication, method, estimand, estimator) cell of the raw table."""

    rep: int
    n: int
    ps_method: str
    estimand: str
    estimator: str
    estimate: float
    failed: bool
    aug_term: float

    def sort_key(self):
        return (self.rep, self.ps_method, self.estimand, self.estimator)


@dataclass(frozen=True)
class ScatterRecord:
    """One unit of the designated replication, for score scatter plots."""

    unit: int
    treatment: int
    e_true: float
    e_hat: float
    ps_method: str


@dataclass(frozen=True)
class MonteCarloSummary:
    """Distribution summary of one raw-table cell group.

    Statistics are computed over the non-failed replications only; the
    failure count keeps the bookkeeping honest
    (``n_failed + summarized count = n_replications``).
    """

    ps_method: str
    estimand: str
    estimator: str
    truth: float
    n_replications: int
    n_failed: int
    mean: float
    sd: float
    median: float
    minimum: float
    maximum: float
    bias: float
    rmse: float


def summarize_rows(rows, truth: TruthOracle) -> tuple:
    """Collapse raw rows into per-(method, estimand, estimator) summaries.

    Args:
        rows: raw records from one study (any order; they are sorted here,
            so the result is independent of how replications were
            scheduled).
        truth: oracle supplying the bias reference per estimand.

    Returns:
        Tuple of ``MonteCarloSummary`` in sorted key order.  The RMSE uses
        the population mean square about the truth, so
        ``rmse**2 = bias**2 + sd**2 (R-1)/R`` holds exactly up to float
        noise, with R the summarized count.
    """
    ordered = sorted(rows, key=lambda r: (r.ps_method, r.estimand, r.estimator, r.rep))
    out = []
    for key, group in itertools.groupby(
        ordered, key=lambda r: (r.ps_method, r.estimand, r.estimator)
    ):
        group = list(group)
        truth_value = truth.true_ate if key[1] == "ate" else truth.true_ato
        kept = np.array([g.estimate for g in group if not g.failed], dtype=float)
        n_failed = sum(1 for g in group if g.failed)
        if kept.size == 0:
            mean = sd = median = lo = hi = bias = rmse = float("nan")
        else:
            mean = float(kept.mean())
            sd = float(kept.std(ddof=1)) if kept.size > 1 else float("nan")
            median = float(np.median(kept))
            lo = float(kept.min())
            hi = float(kept.max())
            bias = mean - truth_value
            rmse = float(np.sqrt(np.mean((kept - truth_value) ** 2)))
        out.append(
            MonteCarloSummary(
                ps_method=key[0],
                estimand=key[1],
                estimator=key[2],
                truth=truth_value,
                n_replications=len(group),
                n_failed=n_failed,
                mean=mean,
                sd=sd,
                median=median,
                minimum=lo,
                maximum=hi,
                bias=bias,
                rmse=rmse,
            )
        )
    return tuple(out)


# ---------------------------------------------------------------------------
# Study design and runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyDesign:
    """Resolved plan for one Monte Carlo study.

    Attributes:
        n: sample size per replication.
        replications: number of replications.
        ps_methods: method names to fit each replication, drawn from
            ``PS_METHODS``.
        estimands: subset of ("ate", "ato").
        estimators: subset of ("ipw", "aipw", "br"); the outcome-assisted
            estimators apply to the ATO only, so requesting them with the
            ATE alone simply yields no such rows.
        coefficient_seed: seed of the frozen coefficient draw.
        data_seed: base seed of the per-replication data streams.
        method_seed: base seed of method-internal randomness (bagging,
            random starts).
        oracle_seed: seed of the truth oracle sample.
        oracle_n: truth oracle sample size.
        outcome_terms: working outcome model design (deliberately much
            simpler than the true outcome surface).
        outcome_family: outcome family tag, normally "auto".
        scatter_rep: replication whose fitted scores are exported for
            scatter diagnostics, or None for no export.
        workers: process count; any value yields the same raw table.
        bcart: boosting configuration shared by all replications.
        sdr_q: index dimension of the single-index method.
        sdr_bandwidth: optional fixed bandwidth for the single-index fits.
    """

    n: int
    replications: int
    ps_methods: tuple = ("oracle", "logistic", "cbps", "bcart", "integrated")
    estimands: tuple = ("ate",)
    estimators: tuple = ("ipw",)
    coefficient_seed: int = 7
    data_seed: int = 11
    method_seed: int = 13
    oracle_seed: int = 17
    oracle_n: int = 1_000_000
    outcome_terms: tuple = OUTCOME_TERMS
    outcome_family: str = "auto"
    scatter_rep: Optional[int] = 0
    workers: int = 1
    bcart: BcartConfig = field(default_factory=BcartConfig)
    sdr_q: int = 2
    sdr_bandwidth: Optional[float] = None


@dataclass(frozen=True)
class StudyResult:
    """Everything one study run produces.

    ``raw_rows`` is the canonical artifact: sorted, complete (one row per
    replication, method, and estimand/estimator pair), and byte-stable
    through ``raw_table_text``.  ``failures`` carries the message behind
    every failed cell for diagnostics.
    """

    design: StudyDesign
    spec: DgpSpec
    truth: TruthOracle
    raw_rows: tuple
    summaries: tuple
    scatter_rows: tuple
    failures: tuple


def estimation_pairs(design: StudyDesign) -> tuple:
    """The (estimand, estimator) pairs a design evaluates per method."""
    pairs = []
    for estimand in design.estimands:
        for estimator in design.estimators:
            if estimator in ("aipw", "br") and estimand != "ato":
                continue
            pairs.append((estimand, estimator))
    return tuple(pairs)


def _fit_oracle(design, sample, rep):
    return PropensityFit.from_raw(sample.e_true, "oracle")


def _fit_logistic(design, sample, rep):
    data = sample.dataset
    spec = ModelSpec(terms=LOGISTIC_TERMS, link="logit")
    fit = fit_glm(data.covariates, data.treatment, spec)
    scores = predict_propensity(fit, spec, data.covariates)
    return PropensityFit.from_raw(
        scores, "logistic", converged=fit.converged, diagnostics=dict(fit.diagnostics)
    )


def _fit_cbps_with(terms, tag, sample):
    data = sample.dataset
    fit = fit_cbps(data, terms, BalanceSpec(moment_terms=terms))
    scores = predict_cbps(fit, data.covariates)
    diag = dict(fit.diagnostics)
    diag["balance_residual_max"] = float(np.max(np.abs(fit.balance_residual)))
    if not fit.converged:
        diag.setdefault("reason", "balance_conditions_not_met")
    return PropensityFit.from_raw(scores, tag, converged=fit.converged, diagnostics=diag)


def _fit_cbps(design, sample, rep):
    return _fit_cbps_with(CBPS_TERMS, "cbps", sample)


def _fit_cbps_third(design, sample, rep):
    return _fit_cbps_with(CBPS_THIRD_TERMS, "cbps_third", sample)


def _method_stream(design, rep, name):
    return RngStream(
        design.method_seed, rep * _METHOD_STRIDE + _METHOD_LANES[name]
    )


def _fit_bcart(design, sample, rep):
    data = sample.dataset
    sub = Dataset(
        treatment=data.treatment,
        covariates=data.covariates[:, :_N_CONFOUNDERS],
        outcome=None,
        column_names=data.column_names[:_N_CONFOUNDERS],
    )
    model = fit_bcart(sub, design.bcart, rng=_method_stream(design, rep, "bcart"))
    fit = predict_bcart(model, sub.covariates)
    return PropensityFit.from_raw(
        fit.raw_scores, "bcart", converged=fit.converged, diagnostics=dict(fit.diagnostics)
    )


def _candidate_specs():
    return tuple(ModelSpec(terms=t, link="logit") for t in CANDIDATE_TERMS)


def _fit_integrated(design, sample, rep):
    data = sample.dataset
    cand = fit_candidates(data.covariates, data.treatment, _candidate_specs())
    ifit = fit_integrated(data.covariates, data.treatment, cand)
    scores = predict_integrated(ifit, cand, data.covariates)
    diag = dict(ifit.diagnostics)
    diag["gamma"] = tuple(float(v) for v in ifit.gamma)
    return PropensityFit.from_raw(
        scores, "integrated", converged=ifit.converged, diagnostics=diag
    )


def _fit_ma(design, sample, rep):
    data = sample.dataset
    cand = fit_candidates(data.covariates, data.treatment, _candidate_specs())
    mfit = fit_ma(cand)
    scores = predict_ma(mfit, cand, data.covariates)
    diag = {
        "weights": tuple(float(w) for w in mfit.weights),
        "criterion": mfit.criterion,
    }
    converged = cand.all_converged
    if not converged:
        diag["reason"] = "candidate_fit_not_converged"
    return PropensityFit.from_raw(scores, "ma", converged=converged, diagnostics=diag)


def _fit_sdr(design, sample, rep):
    data = sample.dataset
    n = data.n_units
    X = np.column_stack([np.ones(n), data.covariates[:, :_N_CONFOUNDERS]])
    sub = Dataset(
        treatment=data.treatment,
        covariates=X,
        outcome=None,
        column_names=("x1",) + tuple(f"x{j + 2}" for j in range(_N_CONFOUNDERS)),
    )
    _, fit = fit_sdr(
        sub,
        q=design.sdr_q,
        rng=_method_stream(design, rep, "sdr"),
        bandwidth=design.sdr_bandwidth,
    )
    return PropensityFit.from_raw(
        fit.raw_scores, "sdr", converged=fit.converged, diagnostics=dict(fit.diagnostics)
    )


PS_METHODS = {
    "oracle": _fit_oracle,
    "logistic": _fit_logistic,
    "cbps": _fit_cbps,
    "cbps_third": _fit_cbps_third,
    "bcart": _fit_bcart,
    "integrated": _fit_integrated,
    "ma": _fit_ma,
    "sdr": _fit_sdr,
}


def _check_design(design: StudyDesign) -> None:
    if design.n < 1:
        raise ValidationError(f"need n >= 1, got {design.n}")
    if design.replications < 1:
        raise ValidationError(f"need replications >= 1, got {design.replications}")
    if design.workers < 1:
        raise ValidationError(f"need workers >= 1, got {design.workers}")
    if design.oracle_n < 1:
        raise ValidationError(f"need oracle_n >= 1, got {design.oracle_n}")
    if not design.ps_methods:
        raise ValidationError("a study needs at least one propensity method")
    if len(set(design.ps_methods)) != len(design.ps_methods):
        raise ValidationError(f"duplicate method names in {design.ps_methods!r}")
    for name in design.ps_methods:
        if name not in PS_METHODS:
            raise ValidationError(
                f"unknown method {name!r}; known: {sorted(PS_METHODS)}"
            )
    for estimand in design.estimands:
        if estimand not in _ESTIMANDS:
            raise ValidationError(f"unknown estimand {estimand!r}")
    for estimator in design.estimators:
        if estimator not in _ESTIMATORS:
            raise ValidationError(f"unknown estimator {estimator!r}")
    if not estimation_pairs(design):
        raise ValidationError(
            "design evaluates nothing: no valid (estimand, estimator) pair"
        )
    if design.scatter_rep is not None and not (
        0 <= design.scatter_rep < design.replications
    ):
        raise ValidationError(
            f"scatter_rep {design.scatter_rep} outside 0..{design.replications - 1}"
        )


def _estimate_cell(data, fit, outcome_model, br_cache, estimand, estimator):
    """One estimator evaluation; returns (estimate, aug_term)."""
    if estimator == "ipw":
        rec = ipw_ate(data, fit) if estimand == "ate" else ipw_ato(data, fit)
        return rec.estimate, float("nan")
    if outcome_model is None:
        raise ValidationError("outcome model unavailable")
    if estimator == "aipw":
        rec = aipw_ato(data, fit, outcome_model)
        return rec.estimate, rec.components["aug"]
    if "aug" not in br_cache:
        br_cache["aug"] = fit_br_augmented(data, fit, outcome_model)
    rec = br_ato(data, fit, br_cache["aug"])
    return rec.estimate, float("nan")


def _replicate(design: StudyDesign, rep: int):
    """Run one replication; returns (raw rows, scatter rows, failures)."""
    spec = DgpSpec.draw(design.coefficient_seed)
    sample = generate_dataset(spec, design.n, RngStream(design.data_seed, rep))
    data = sample.dataset
    pairs = estimation_pairs(design)

    raw, scatter, failures = [], [], []
    needs_outcome = any(est in ("aipw", "br") for _, est in pairs)
    outcome_model = None
    if needs_outcome:
        try:
            outcome_model = fit_outcome_model(
                data, design.outcome_terms, family=design.outcome_family
            )
        except Exception as exc:  # recorded per cell below
            failures.append((rep, "outcome_model", f"{type(exc).__name__}: {exc}"))

    for name in design.ps_methods:
        try:
            fit = PS_METHODS[name](design, sample, rep)
        except Exception as exc:
            failures.append((rep, name, f"{type(exc).__name__}: {exc}"))
            for estimand, estimator in pairs:
                raw.append(
                    RawRecord(rep, design.n, name, estimand, estimator,
                              float("nan"), True, float("nan"))
                )
            continue
        if rep == design.scatter_rep:
            for i in range(data.n_units):
                scatter.append(
                    ScatterRecord(
                        unit=i,
                        treatment=int(data.treatment[i]),
                        e_true=float(sample.e_true[i]),
                        e_hat=float(fit.scores[i]),
                        ps_method=name,
                    )
                )
        br_cache = {}
        for estimand, estimator in pairs:
            try:
                estimate, aug = _estimate_cell(
                    data, fit, outcome_model, br_cache, estimand, estimator
                )
                if not math.isfinite(estimate):
                    raise ValidationError(f"non-finite estimate {estimate!r}")
                raw.append(
                    RawRecord(rep, design.n, name, estimand, estimator,
                              float(estimate), False, float(aug))
                )
            except Exception as exc:
                failures.append(
                    (rep, f"{name}/{estimand}/{estimator}",
                     f"{type(exc).__name__}: {exc}")
                )
                raw.append(
                    RawRecord(rep, design.n, name, estimand, estimator,
                              float("nan"), True, float("nan"))
                )
    return raw, scatter, failures


def _replicate_args(args):
    return _replicate(*args)


def run_study(design: StudyDesign) -> StudyResult:
    """Run a full Monte Carlo study.

    Every replication derives its own data stream (``data_seed``, rep) and
    method streams, so results do not depend on scheduling; rows are sorted
    into canonical order before summarizing.  Method failures inside a
    replication are recorded as failed cells and never abort the study.

    Args:
        design: resolved study plan.

    Returns:
        The study result; ``raw_rows`` and the text exports are
        byte-identical across runs and worker counts.

    Raises:
        ValidationError: the design itself is invalid (unknown method or
            estimand, non-positive counts, scatter replication out of
            range).
    """
    _check_design(design)
    spec = DgpSpec.draw(design.coefficient_seed)
    truth = compute_truth(spec, design.oracle_n, RngStream(design.oracle_seed, 0))

    reps = range(design.replications)
    if design.workers == 1:
        parts = [_replicate(design, rep) for rep in reps]
    else:
        with ProcessPoolExecutor(max_workers=design.workers) as pool:
            parts = list(pool.map(_replicate_args, [(design, r) for r in reps]))

    raw = sorted(
        itertools.chain.from_iterable(p[0] for p in parts), key=RawRecord.sort_key
    )
    scatter = list(itertools.chain.from_iterable(p[1] for p in parts))
    scatter.sort(key=lambda s: (s.ps_method, s.unit))
    failures = sorted(itertools.chain.from_iterable(p[2] for p in parts))
    return StudyResult(
        design=design,
        spec=spec,
        truth=truth,
        raw_rows=tuple(raw),
        summaries=summarize_rows(raw, truth),
        scatter_rows=tuple(scatter),
        failures=tuple(failures),
    )


# ---------------------------------------------------------------------------
# Text exports
# ---------------------------------------------------------------------------


def raw_table_text(rows) -> str:
    """Raw table as CSV text (17 significant digits, canonical order)."""
    lines = [_RAW_HEADER]
    for r in sorted(rows, key=RawRecord.sort_key):
        lines.append(
            f"{r.rep},{r.n},{r.ps_method},{r.estimand},{r.estimator},"
            f"{_FMT % r.estimate},{int(r.failed)},{_FMT % r.aug_term}"
        )
    return "\n".join(lines) + "\n"


def scatter_table_text(rows) -> str:
    """Scatter export as CSV text (one row per unit and method)."""
    lines = [_SCATTER_HEADER]
    for s in rows:
        lines.append(
            f"{s.unit},{s.treatment},{_FMT % s.e_true},{_FMT % s.e_hat},{s.ps_method}"
        )
    return "\n".join(lines) + "\n"


def summary_table_text(summaries, digits: int = 3) -> str:
    """Summary table as CSV text, rounded for human reading.

    Args:
        summaries: ``MonteCarloSummary`` records.
        digits: decimal places for the statistics columns.

    Returns:
        CSV text in the familiar mean/SD/median/range/bias/RMSE layout.
    """
    lines = [_SUMMARY_HEADER]
    for s in summaries:
        stats = (s.mean, s.sd, s.median, s.minimum, s.maximum, s.bias, s.rmse)
        formatted = ",".join(f"{v:.{digits}f}" for v in stats)
        lines.append(
            f"{s.ps_method},{s.estimand},{s.estimator},"
            f"{s.n_replications},{s.n_failed},{formatted}"
        )
    return "\n".join(lines) + "\n"
