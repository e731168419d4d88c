"""Weighted average treatment effect estimators.

Estimands: the ATE (weight 1) and the overlap-population ATO (weight
``e(1-e)``).  Estimators: self-normalized (Hajek) IPW for both, plus two
outcome-model-assisted estimators for the ATO:

* AIPW: overlap-weighted model difference plus IPW-weighted residual
  corrections, one per arm;
* BR: a plug-in that first refits the outcome model jointly with two
  "clever covariates" (the per-arm overlap weights) so that the normalized
  weighted mean residuals vanish, then averages the model difference under
  overlap weights.

Outcome working models come in two families.  Continuous outcomes use a
linear model; the joint (xi, phi) solve is then exactly least squares on
the design with the two overlap columns appended.  Binary outcomes use a
Bernoulli model with the same augmented design inside the logit link, so
every plug-in prediction lies in (0, 1) and the BR estimate inherits the
outcome range; the two weighted-mean-residual equations are exactly the
score components of the appended columns, so they still vanish at the
solution.  ``family="auto"`` picks Bernoulli iff every outcome value is 0
or 1.

All IPW forms are self-normalized; there are no unnormalized variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .data import Dataset, as_scores
from .errors import RankDeficientDesign, ValidationError
from .glm import fit_glm_design
from .terms import FeatureMap


@dataclass(frozen=True)
class EstimateRecord:
    """One (estimand, estimator) result for one propensity method."""

    estimand: str
    estimator: str
    ps_method: str
    estimate: float
    components: dict = field(default_factory=dict)

    def recombined(self) -> float:
        """Rebuild the estimate from its stored components."""
        c = self.components
        if self.estimator == "ipw":
            return c["mu1"] - c["mu0"]
        if self.estimator == "aipw":
            return c["main"] + c["aug_treated"] - c["aug_control"]
        if self.estimator == "br":
            return c["main"]
        raise ValidationError(f"unknown estimator tag {self.estimator!r}")


def _method_tag(ps) -> str:
    return getattr(ps, "method", "scores")


def ipw_ate(data: Dataset, ps) -> EstimateRecord:
    """Hajek IPW estimate of the ATE.

    Args:
        data: dataset with an outcome.
        ps: ``PropensityFit`` or a bare score vector in (0, 1).

    Returns:
        Record with components ``mu1`` and ``mu0`` (the self-normalized arm
        means); the estimate is their difference.
    """
    y = data.require_outcome("ipw_ate")
    t = data.treatment.astype(float)
    e = as_scores(ps, data.n_units)
    w1 = t / e
    w0 = (1.0 - t) / (1.0 - e)
    mu1 = float(w1 @ y / w1.sum())
    mu0 = float(w0 @ y / w0.sum())
    return EstimateRecord(
        estimand="ate",
        estimator="ipw",
        ps_method=_method_tag(ps),
        estimate=mu1 - mu0,
        components={"mu1": mu1, "mu0": mu0},
    )


def ipw_ato(data: Dataset, ps) -> EstimateRecord:
    """Hajek IPW estimate of the ATO (overlap weights).

    Arm weights are ``t(1-e)`` and ``(1-t)e``; units with scores near the
    boundary contribute almost nothing, which is the point of the overlap
    population.
    """
    y = data.require_outcome("ipw_ato")
    t = data.treatment.astype(float)
    e = as_scores(ps, data.n_units)
    w1 = t * (1.0 - e)
    w0 = (1.0 - t) * e
    mu1 = float(w1 @ y / w1.sum())
    mu0 = float(w0 @ y / w0.sum())
    return EstimateRecord(
        estimand="ato",
        estimator="ipw",
        ps_method=_method_tag(ps),
        estimate=mu1 - mu0,
        components={"mu1": mu1, "mu0": mu0},
    )


# ---------------------------------------------------------------------------
# Outcome models
# ---------------------------------------------------------------------------

_FAMILIES = ("gaussian", "bernoulli")


def _resolve_family(family: str, y: np.ndarray) -> str:
    if family == "auto":
        return "bernoulli" if np.isin(y, (0.0, 1.0)).all() else "gaussian"
    if family not in _FAMILIES:
        raise ValidationError(f"unknown outcome family {family!r}")
    return family


@dataclass(frozen=True)
class OutcomeModel:
    """Working model m(t, x): linear predictor design(t, x) @ xi.

    Gaussian family predicts the linear predictor itself; Bernoulli predicts
    its expit.
    """

    terms: tuple
    xi: np.ndarray
    family: str = "gaussian"
    converged: bool = True

    def linear_predictor(self, covariates, treatment_value) -> np.ndarray:
        X = np.asarray(covariates, dtype=float)
        t = np.full(X.shape[0], float(treatment_value))
        D = FeatureMap(self.terms).design(X, treatment=t)
        return D @ self.xi

    def predict(self, covariates, treatment_value) -> np.ndarray:
        """Model predictions with the treatment column set to a constant."""
        eta = self.linear_predictor(covariates, treatment_value)
        return expit(eta) if self.family == "bernoulli" else eta


@dataclass(frozen=True)
class AugmentedOutcomeModel:
    """Outcome model refit jointly with the two clever covariates.

    ``phi1`` and ``phi0`` multiply the normalized clever covariates
    ``t(1-e)/sum(t(1-e))`` and ``(1-t)e/sum((1-t)e)`` in the linear
    predictor of ``base``.
    """

    base: OutcomeModel
    phi1: float
    phi0: float
    rank_deficient: bool = False
    diagnostics: dict = field(default_factory=dict)


def fit_outcome_model(data: Dataset, terms, family: str = "auto") -> OutcomeModel:
    """Fit the working outcome model.

    Args:
        data: dataset with an outcome.
        terms: design terms; may reference ``t``.
        family: "gaussian", "bernoulli", or "auto" (Bernoulli iff the
            outcome is entirely 0/1 valued).

    Returns:
        Fitted model; Gaussian fits are exact least squares, Bernoulli fits
        are maximum likelihood and may come back flagged (``converged``
        False) on separated data.

    Raises:
        RankDeficientDesign: the design does not have full column rank.
    """
    y = data.require_outcome("fit_outcome_model")
    fam = _resolve_family(family, y)
    fm = FeatureMap(terms)
    D = fm.design(data.covariates, treatment=data.treatment.astype(float))
    if fam == "bernoulli":
        fit = fit_glm_design(D, y, link="logit", design_label="outcome design")
        return OutcomeModel(terms=fm.names, xi=fit.beta, family=fam, converged=fit.converged)
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise RankDeficientDesign(
            f"outcome design for terms {list(fm.names)} is rank deficient"
        )
    xi, *_ = np.linalg.lstsq(D, y, rcond=None)
    return OutcomeModel(terms=fm.names, xi=xi, family=fam)


def aipw_ato(data: Dataset, ps, om: OutcomeModel) -> EstimateRecord:
    """Augmented IPW estimate of the ATO.

    The estimate is ``main + aug_treated - aug_control`` where ``main`` is
    the overlap-weighted model difference and the augmentation terms are
    the arm-specific weighted mean residuals; all three are stored in
    components, along with their net effect under ``aug``.
    """
    y = data.require_outcome("aipw_ato")
    t = data.treatment.astype(float)
    e = as_scores(ps, data.n_units)
    m1 = om.predict(data.covariates, 1.0)
    m0 = om.predict(data.covariates, 0.0)
    h = e * (1.0 - e)
    main = float(h @ (m1 - m0) / h.sum())
    w1 = t * (1.0 - e)
    w0 = (1.0 - t) * e
    aug_t = float(w1 @ (y - m1) / w1.sum())
    aug_c = float(w0 @ (y - m0) / w0.sum())
    return EstimateRecord(
        estimand="ato",
        estimator="aipw",
        ps_method=_method_tag(ps),
        estimate=main + aug_t - aug_c,
        components={
            "main": main,
            "aug_treated": aug_t,
            "aug_control": aug_c,
            "aug": aug_t - aug_c,
        },
    )


def _reduced_basis_glm(A: np.ndarray, y: np.ndarray):
    """Bernoulli fit on a rank-deficient design via pivoted-QR reduction.

    Coefficients of dropped (numerically dependent) columns are set to 0;
    the fit uses the retained independent columns only.
    """
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(A.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    fit = fit_glm_design(
        A[:, keep], y, link="logit", tol=1e-10, design_label="augmented outcome design"
    )
    beta = np.zeros(A.shape[1])
    beta[keep] = fit.beta
    return beta, fit.converged


def fit_br_augmented(data: Dataset, ps, om: OutcomeModel) -> AugmentedOutcomeModel:
    """Refit the outcome model with the two clever covariates appended.

    The appended regressor columns are the raw overlap weights ``t(1-e)``
    and ``(1-t)e``; their coefficients are rescaled so that the stored
    ``phi1`` and ``phi0`` multiply the normalized clever covariates.  For a
    Gaussian model the joint solve is exactly least squares on the
    augmented design; for a Bernoulli model it is maximum likelihood with
    the same design inside the logit link.  Either way the two normalized
    weighted mean residuals vanish at the solution, which is the defining
    estimating equation for (phi1, phi0).

    A rank-deficient augmented design (clever covariates collinear with the
    model columns) is flagged instead of raised: the Gaussian path takes
    the minimum-norm least-squares solution, the Bernoulli path drops the
    dependent columns (their coefficients are set to 0, so phi is kept
    where identifiable).
    """
    y = data.require_outcome("fit_br_augmented")
    t = data.treatment.astype(float)
    e = as_scores(ps, data.n_units)
    fm = FeatureMap(om.terms)
    D = fm.design(data.covariates, treatment=t)
    w1 = t * (1.0 - e)
    w0 = (1.0 - t) * e
    s1 = float(w1.sum())
    s0 = float(w0.sum())
    A = np.column_stack([D, w1, w0])
    rank_deficient = bool(np.linalg.matrix_rank(A) < A.shape[1])
    converged = True
    if om.family == "bernoulli":
        if rank_deficient:
            coef, converged = _reduced_basis_glm(A, y)
        else:
            fit = fit_glm_design(
                A, y, link="logit", tol=1e-10, design_label="augmented outcome design"
            )
            coef, converged = fit.beta, fit.converged
        resid = y - expit(A @ coef)
    else:
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
    diag = {
        "resid_mean_treated": float(w1 @ resid / s1),
        "resid_mean_control": float(w0 @ resid / s0),
        "converged": converged,
    }
    return AugmentedOutcomeModel(
        base=OutcomeModel(terms=fm.names, xi=coef[:-2], family=om.family, converged=converged),
        phi1=float(coef[-2] * s1),
        phi0=float(coef[-1] * s0),
        rank_deficient=rank_deficient,
        diagnostics=diag,
    )


def br_ato(data: Dataset, ps, aug: AugmentedOutcomeModel) -> EstimateRecord:
    """Plug-in ATO estimate from the augmented outcome model.

    Predictions plug the requested arm into the augmented linear predictor:
    ``eta(1, x_i) = eta_base(1, x_i) + phi1 (1-e_i)/sum(t(1-e))`` and
    ``eta(0, x_i) = eta_base(0, x_i) + phi0 e_i/sum((1-t)e)``, mapped
    through the family's mean function; the estimate is the
    overlap-weighted mean of their difference.  For a Bernoulli model every
    prediction lies in (0, 1), so the estimate lies in (-1, 1).
    """
    data.require_outcome("br_ato")
    t = data.treatment.astype(float)
    e = as_scores(ps, data.n_units)
    s1 = float((t * (1.0 - e)).sum())
    s0 = float(((1.0 - t) * e).sum())
    eta1 = aug.base.linear_predictor(data.covariates, 1.0) + aug.phi1 * (1.0 - e) / s1
    eta0 = aug.base.linear_predictor(data.covariates, 0.0) + aug.phi0 * e / s0
    if aug.base.family == "bernoulli":
        m1, m0 = expit(eta1), expit(eta0)
    else:
        m1, m0 = eta1, eta0
    h = e * (1.0 - e)
    estimate = float(h @ (m1 - m0) / h.sum())
    return EstimateRecord(
        estimand="ato",
        estimator="br",
        ps_method=_method_tag(ps),
        estimate=estimate,
        components={"main": estimate, "phi1": aug.phi1, "phi0": aug.phi0},
    )
