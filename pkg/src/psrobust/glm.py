"""Binary-response GLMs (logit and probit) fit by Fisher scoring.

The response distribution is written in exponential-family form
``t*theta - b(theta) + c`` with natural parameter ``theta`` equal to the
log-odds; the Bernoulli family has ``b(theta) = log(1 + exp(theta))`` and the
Gaussian family (kept for unit-level checks of the family algebra and the
identity-link fit) has ``b(theta) = theta^2 / 2`` with dispersion sigma^2.

Fitting uses Fisher scoring with step-halving on the log-likelihood.
Convergence is declared when the mean score ``(1/n) sum_i s_i(beta)`` has
max-norm at most ``tol``; coefficients wandering past a norm cap are treated
as separation and returned flagged instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

from .data import clamp_propensity
from .errors import RankDeficientDesign, ValidationError
from .terms import FeatureMap

_LINKS = ("logit", "probit", "identity")

# stop and flag the fit when any coefficient exceeds this magnitude
SEPARATION_CAP = 30.0


@dataclass(frozen=True)
class FamilySpec:
    """Exponential-family ingredients: b and its first two derivatives.

    ``b`` must be strictly convex (``bddot > 0``), which makes the natural
    parameter identifiable and every Newton step well posed.
    """

    name: str
    b: Callable
    bdot: Callable
    bddot: Callable
    dispersion: float = 1.0


def _bern_b(theta):
    return np.logaddexp(0.0, theta)


def _bern_bddot(theta):
    p = expit(theta)
    return p * (1.0 - p)


BERNOULLI = FamilySpec("bernoulli", b=_bern_b, bdot=expit, bddot=_bern_bddot)


def gaussian_family(sigma2: float = 1.0) -> FamilySpec:
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    return FamilySpec(
        "gaussian",
        b=lambda th: 0.5 * np.asarray(th, dtype=float) ** 2,
        bdot=lambda th: np.asarray(th, dtype=float),
        bddot=lambda th: np.ones_like(np.asarray(th, dtype=float)),
        dispersion=float(sigma2),
    )


@dataclass(frozen=True)
class ModelSpec:
    """A feature map plus a link function.

    Args:
        terms: design terms (see ``psrobust.terms``).
        link: "logit" or "probit" for binary models; "identity" is accepted
            only together with the Gaussian family.
    """

    terms: tuple
    link: str = "logit"

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ValidationError(f"unknown link {self.link!r}; expected one of {_LINKS}")
        object.__setattr__(self, "terms", tuple(self.terms))

    @cached_property
    def feature_map(self) -> FeatureMap:
        return FeatureMap(self.terms)

    def design(self, covariates) -> np.ndarray:
        return self.feature_map.design(covariates)


@dataclass(frozen=True)
class GlmFit:
    """Result of one GLM fit.

    ``converged`` is False for separation, iteration cap, or a stalled line
    search; the reason code is in ``diagnostics["reason"]``.
    """

    beta: np.ndarray
    log_likelihood: float
    n_params: int
    n_obs: int
    converged: bool
    n_iter: int
    diagnostics: dict = field(default_factory=dict)


# -- link algebra -----------------------------------------------------------

def _check_link_family(link: str, family: FamilySpec) -> None:
    if family.name == "gaussian" and link != "identity":
        raise ValidationError("gaussian fits use the identity link")
    if family.name == "bernoulli" and link == "identity":
        raise ValidationError("binary fits need the logit or probit link")


def link_mean(link: str, eta):
    """Mean response as a function of the linear predictor."""
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        return expit(eta)
    if link == "probit":
        return ndtr(eta)
    return eta


def link_mean_deriv(link: str, eta):
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        p = expit(eta)
        return p * (1.0 - p)
    if link == "probit":
        return np.exp(-0.5 * eta * eta) / math.sqrt(2.0 * math.pi)
    return np.ones_like(eta)


def link_log_odds(link: str, eta):
    """Natural parameter theta = log(p / (1 - p)) of the fitted mean."""
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        return eta
    if link == "probit":
        # log(Phi(eta)) - log(1 - Phi(eta)), both factors computed in log space
        return log_ndtr(eta) - log_ndtr(-eta)
    raise ValidationError("log-odds are defined for binary links only")


# -- likelihood, score, information -----------------------------------------

def glm_log_likelihood(design, response, beta, link: str, family: FamilySpec = BERNOULLI) -> float:
    """Total log-likelihood at ``beta`` (additive constants included)."""
    _check_link_family(link, family)
    eta = np.asarray(design, dtype=float) @ np.asarray(beta, dtype=float)
    y = np.asarray(response, dtype=float)
    if family.name == "bernoulli":
        if link == "logit":
            return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        return float(np.sum(y * log_ndtr(eta) + (1.0 - y) * log_ndtr(-eta)))
    # gaussian, identity link
    resid = y - eta
    n = y.shape[0]
    s2 = family.dispersion
    return float(-0.5 * np.sum(resid * resid) / s2 - 0.5 * n * math.log(2.0 * math.pi * s2))


def glm_score(design, response, beta, link: str, family: FamilySpec = BERNOULLI) -> np.ndarray:
    """Mean score vector ``(1/n) sum_i (y_i - mu_i) w_i d_i``.

    The same quantity the fitter drives to zero, so a fresh call at the
    returned coefficients certifies the fit.
    """
    _check_link_family(link, family)
    D = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    eta = D @ np.asarray(beta, dtype=float)
    if family.name == "gaussian":
        u = (y - eta) / family.dispersion
    else:
        p = link_mean(link, eta)
        if link == "logit":
            u = y - p
        else:
            var = np.clip(p * (1.0 - p), 1e-300, None)
            u = (y - p) * link_mean_deriv(link, eta) / var
    return D.T @ u / D.shape[0]


def _fisher_information(D, eta, link, family):
    # mean Fisher information (1/n) D' W D
    if family.name == "gaussian":
        W = np.full(eta.shape, 1.0 / family.dispersion)
    else:
        p = link_mean(link, eta)
        dmu = link_mean_deriv(link, eta)
        if link == "logit":
            W = p * (1.0 - p)
        else:
            W = dmu * dmu / np.clip(p * (1.0 - p), 1e-300, None)
    return (D * W[:, None]).T @ D / D.shape[0]


def fit_glm_design(
    design,
    response,
    link: str = "logit",
    family: FamilySpec = BERNOULLI,
    tol: float = 1e-8,
    max_iter: int = 100,
    beta_start: Optional[np.ndarray] = None,
    design_label: str = "design",
) -> GlmFit:
    """Fit a GLM on an already-built design matrix.

    Args:
        design: (n, q) full-column-rank matrix.
        response: length-n response (0/1 for the Bernoulli family).
        link: "logit", "probit", or "identity" (Gaussian only).
        family: BERNOULLI (default) or ``gaussian_family(sigma2)``.
        tol: convergence threshold on the mean-score max-norm.
        max_iter: Fisher-scoring iteration cap.
        beta_start: optional warm start, defaults to zeros.
        design_label: name used in error messages.

    Returns:
        ``GlmFit``; ``converged`` is False on separation, a stalled line
        search, or the iteration cap, with a reason code in diagnostics.

    Raises:
        RankDeficientDesign: the design matrix is column-rank deficient.
    """
    _check_link_family(link, family)
    D = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, q = D.shape
    if y.shape != (n,):
        raise ValidationError(f"response has shape {y.shape}, expected ({n},)")
    if np.linalg.matrix_rank(D) < q:
        raise RankDeficientDesign(f"{design_label} has rank below {q}")

    if family.name == "gaussian":
        # identity link: the MLE is ordinary least squares
        beta, *_ = np.linalg.lstsq(D, y, rcond=None)
        ll = glm_log_likelihood(D, y, beta, link, family)
        s = glm_score(D, y, beta, link, family)
        return GlmFit(beta, ll, q, n, True, 1, {"score_max": float(np.max(np.abs(s)))})

    beta = np.zeros(q) if beta_start is None else np.asarray(beta_start, dtype=float).copy()
    ll = glm_log_likelihood(D, y, beta, link, family)
    converged = False
    reason = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        s = glm_score(D, y, beta, link, family)
        if np.max(np.abs(s)) <= tol:
            converged = True
            break
        if np.max(np.abs(beta)) > SEPARATION_CAP:
            reason = "separation"
            break
        F = _fisher_information(D, D @ beta, link, family)
        try:
            step = np.linalg.solve(F, s)
        except np.linalg.LinAlgError:
            reason = "singular_information"
            break
        lam = 1.0
        new_beta, new_ll = beta, ll
        for _ in range(40):
            cand = beta + lam * step
            cand_ll = glm_log_likelihood(D, y, cand, link, family)
            if cand_ll >= ll - 1e-12:
                new_beta, new_ll = cand, cand_ll
                break
            lam *= 0.5
        else:
            reason = "stalled"
            break
        beta, ll = new_beta, new_ll
    s = glm_score(D, y, beta, link, family)
    diag = {"score_max": float(np.max(np.abs(s)))}
    if not converged:
        if reason == "max_iter" and np.max(np.abs(beta)) > SEPARATION_CAP:
            reason = "separation"
        diag["reason"] = reason
    return GlmFit(beta, float(ll), q, n, converged, it, diag)


def fit_glm(
    covariates,
    response,
    spec: ModelSpec,
    family: FamilySpec = BERNOULLI,
    tol: float = 1e-8,
    max_iter: int = 100,
    beta_start: Optional[np.ndarray] = None,
) -> GlmFit:
    """Fit the model given by ``spec`` on raw covariates.

    Builds the design with the spec's feature map, then defers to
    ``fit_glm_design``; see that function for the contract.
    """
    return fit_glm_design(
        spec.design(covariates),
        response,
        link=spec.link,
        family=family,
        tol=tol,
        max_iter=max_iter,
        beta_start=beta_start,
        design_label=f"design for terms {list(spec.terms)}",
    )


def predict_propensity(fit: GlmFit, spec: ModelSpec, covariates) -> np.ndarray:
    """Propensity scores at new covariates, clamped into (0, 1)."""
    eta = spec.design(covariates) @ fit.beta
    return clamp_propensity(link_mean(spec.link, eta))


def log_odds_surface(fit: GlmFit, spec: ModelSpec, covariates) -> np.ndarray:
    """Fitted log-odds theta(x) at new covariates."""
    eta = spec.design(covariates) @ fit.beta
    return link_log_odds(spec.link, eta)


def information_criterion(fit: GlmFit, kind: str = "bic") -> float:
    """AIC ``-2 ll + 2 q`` or BIC ``-2 ll + q log n``."""
    if kind == "aic":
        return -2.0 * fit.log_likelihood + 2.0 * fit.n_params
    if kind == "bic":
        return -2.0 * fit.log_likelihood + fit.n_params * math.log(fit.n_obs)
    raise ValidationError(f"unknown criterion {kind!r}; expected 'aic' or 'bic'")
