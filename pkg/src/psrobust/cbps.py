"""Covariate balancing propensity scores (exact variant).

The propensity model is logistic in a user-chosen design; instead of
maximizing likelihood, the coefficients are chosen so that the inverse
probability weighted moments of a user-chosen set of covariate transforms
balance between arms:

    m(beta) = (1/n) sum_i [t_i/e_i - (1-t_i)/(1-e_i)] g(x_i) = 0.

With r moment terms and q model parameters, r >= q is required.  The
overidentified case is solved by two-step GMM (identity weight first, then
the inverse of the estimated moment covariance); the just-identified case
additionally polishes the GMM solution with a direct root solve so the
balance residual itself is driven to zero.

Only the balance conditions enter the objective; the likelihood-augmented
variant is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

from .data import Dataset, PS_CEIL, PS_FLOOR, as_scores
from .errors import NoConvergence, SingularWeightMatrix, ValidationError
from .glm import fit_glm_design
from .terms import FeatureMap

_JITTER_SEED = 643_510_981
_JITTER_SCALE = 0.25
_N_JITTER = 4
_RIDGE = 1e-8
_JUST_IDENTIFIED_TOL = 1e-6


@dataclass(frozen=True)
class BalanceSpec:
    """Ordered covariate transforms whose weighted means must balance.

    Args:
        moment_terms: term strings in the shared term language; functions of
            the covariates only (no ``t``).
    """

    moment_terms: tuple

    def __post_init__(self):
        if self.feature_map.uses_treatment:
            raise ValidationError("balance moment terms must not reference t")

    @cached_property
    def feature_map(self) -> FeatureMap:
        return FeatureMap(self.moment_terms)

    @property
    def r(self) -> int:
        return self.feature_map.n_terms


@dataclass(frozen=True)
class CbpsFit:
    """Result of one CBPS fit.

    Attributes:
        beta: logistic coefficients on the model design.
        terms: the model design terms, kept for prediction.
        balance_residual: moment vector at beta, one entry per moment term.
        gmm_objective: final objective value under the final weight matrix.
        converged: True when the optimizer succeeded; in the just-identified
            case also requires max |balance_residual| <= 1e-6.
        diagnostics: solver bookkeeping (step objectives, weight fallback).
    """

    beta: np.ndarray
    terms: tuple
    balance_residual: np.ndarray
    gmm_objective: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)


def moment_residual(treatment, scores, moments) -> np.ndarray:
    """Balance moment vector from scores and an evaluated moment matrix."""
    t = np.asarray(treatment, dtype=float)
    e = np.asarray(scores, dtype=float)
    w = t / e - (1.0 - t) / (1.0 - e)
    G = np.asarray(moments, dtype=float)
    return G.T @ w / t.size


def moment_vector(data: Dataset, beta, spec: BalanceSpec, model_terms) -> np.ndarray:
    """Balance moment vector at logistic coefficients ``beta``.

    Scores are computed from the model design with the standard clamping
    before the weights are formed.
    """
    D = FeatureMap(model_terms).design(data.covariates)
    e = np.clip(expit(D @ np.asarray(beta, dtype=float)), PS_FLOOR, PS_CEIL)
    G = spec.feature_map.design(data.covariates)
    return moment_residual(data.treatment, e, G)


def _moment_and_jacobian(t, D, G, beta):
    """Moment vector and its exact Jacobian in beta.

    Clamped units have locally constant scores, so their Jacobian
    contribution is zero.
    """
    n = t.size
    raw = expit(D @ beta)
    e = np.clip(raw, PS_FLOOR, PS_CEIL)
    w = t / e - (1.0 - t) / (1.0 - e)
    m = G.T @ w / n
    inside = (raw > PS_FLOOR) & (raw < PS_CEIL)
    a = t * (1.0 - e) / e + (1.0 - t) * e / (1.0 - e)
    a = np.where(inside, a, 0.0)
    J = -(G * a[:, None]).T @ D / n
    return m, J


def _minimize_gmm(t, D, G, W, starts):
    """Quasi-Newton minimization of m'Wm from several starts; best wins."""

    def objective(beta):
        m, J = _moment_and_jacobian(t, D, G, beta)
        Wm = W @ m
        return float(m @ Wm), 2.0 * J.T @ Wm

    best = None
    for x0 in starts:
        res = scipy.optimize.minimize(objective, x0, jac=True, method="BFGS")
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise NoConvergence("every CBPS start produced a non-finite objective")
    return best


def fit_cbps(data: Dataset, model_terms, spec: BalanceSpec) -> CbpsFit:
    """Fit the exact CBPS by two-step GMM.

    Args:
        data: study data (outcome not needed).
        model_terms: design terms of the logistic propensity model.
        spec: balance conditions; needs at least as many terms as the model
            has parameters.

    Returns:
        CbpsFit; ``diagnostics["weight_fallback"]`` is True when the moment
        covariance could not be inverted and the identity weight was kept
        for step two.

    Raises:
        ValidationError: fewer moment terms than model parameters, or terms
            referencing the treatment.
        RankDeficientDesign: model design without full column rank.
        NoConvergence: no start produced a usable solution.
    """
    fm = FeatureMap(model_terms)
    if fm.uses_treatment:
        raise ValidationError("propensity model terms must not reference t")
    D = fm.design(data.covariates)
    G = spec.feature_map.design(data.covariates)
    q = D.shape[1]
    if spec.r < q:
        raise ValidationError(
            f"need at least {q} moment terms for {q} model parameters, got {spec.r}"
        )
    t = data.treatment.astype(float)

    mle = fit_glm_design(D, t, link="logit", design_label="propensity model design")
    jitter_rng = np.random.default_rng(_JITTER_SEED)
    starts = [mle.beta] + [
        mle.beta + _JITTER_SCALE * jitter_rng.normal(size=q) for _ in range(_N_JITTER)
    ]

    identity = np.eye(spec.r)
    step1 = _minimize_gmm(t, D, G, identity, starts)

    # moment covariance from per-unit contributions at the step-1 solution
    raw = expit(D @ step1.x)
    e1 = np.clip(raw, PS_FLOOR, PS_CEIL)
    u = G * (t / e1 - (1.0 - t) / (1.0 - e1))[:, None]
    omega = u.T @ u / t.size + _RIDGE * identity
    weight_fallback = False
    try:
        cho = scipy.linalg.cho_factor(omega)
        W = scipy.linalg.cho_solve(cho, identity)
        if not np.all(np.isfinite(W)):
            raise SingularWeightMatrix("non-finite inverse moment covariance")
    except (scipy.linalg.LinAlgError, SingularWeightMatrix):
        W = identity
        weight_fallback = True

    step2 = _minimize_gmm(t, D, G, W, [step1.x] + starts)
    beta = step2.x
    success = bool(step2.success)

    polished = False
    if spec.r == q:
        root = scipy.optimize.root(
            lambda b: _moment_and_jacobian(t, D, G, b), beta, jac=True, method="hybr"
        )
        m_beta, _ = _moment_and_jacobian(t, D, G, beta)
        m_root, _ = _moment_and_jacobian(t, D, G, root.x)
        if np.isfinite(m_root).all() and np.max(np.abs(m_root)) < np.max(np.abs(m_beta)):
            beta = root.x
            polished = True
            success = success or bool(root.success)

    resid, _ = _moment_and_jacobian(t, D, G, beta)
    objective = float(resid @ W @ resid)
    converged = success
    if spec.r == q:
        converged = converged and float(np.max(np.abs(resid))) <= _JUST_IDENTIFIED_TOL
    return CbpsFit(
        beta=beta,
        terms=fm.names,
        balance_residual=resid,
        gmm_objective=objective,
        converged=converged,
        diagnostics={
            "step1_objective": float(step1.fun),
            "step2_objective": float(step2.fun),
            "weight_fallback": weight_fallback,
            "polished": polished,
            "mle_start_converged": mle.converged,
        },
    )


def predict_cbps(fit: CbpsFit, covariates) -> np.ndarray:
    """Clamped propensity scores from a CBPS fit."""
    D = FeatureMap(fit.terms).design(covariates)
    return np.clip(expit(D @ fit.beta), PS_FLOOR, PS_CEIL)


def balance_report(data: Dataset, ps, spec: BalanceSpec) -> dict:
    """Per-term IPW-weighted treated-vs-control mean differences.

    Works for any propensity fit or bare score vector; on a CBPS fit's own
    balance spec this reproduces ``CbpsFit.balance_residual`` exactly.
    """
    e = as_scores(ps, data.n_units)
    G = spec.feature_map.design(data.covariates)
    values = moment_residual(data.treatment, e, G)
    return dict(zip(spec.feature_map.names, values.tolist()))
