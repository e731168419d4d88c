"""Scikit-learn style wrappers over the functional fitting core.

Each estimator keeps its configuration in constructor parameters, learns a
propensity model in ``fit(X, y)`` where ``y`` is the 0/1 treatment vector,
and exposes class probabilities through ``predict_proba(X)`` in the usual
(n, 2) layout with the treated-class probability in column 1.  The
functional results, including convergence flags and diagnostics, stay
reachable through the trailing-underscore attributes set by ``fit``
(``propensity_fit_`` plus method-specific objects).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .boost import BcartConfig, fit_bcart, predict_bcart
from .cbps import BalanceSpec, fit_cbps, predict_cbps
from .data import PropensityFit, validate_dataset
from .errors import NoConvergence
from .glm import ModelSpec, fit_glm, predict_propensity
from .integrated import (
    fit_candidates,
    fit_integrated,
    fit_ma,
    predict_integrated,
    predict_ma,
)
from .rng import RngStream
from .sdr import fit_sdr, predict_sdr


def _main_effect_terms(data) -> tuple:
    """Intercept plus one term per covariate column."""
    return ("1",) + tuple(data.column_names)


class _PropensityEstimator(BaseEstimator):
    """Shared prediction surface for the propensity wrappers."""

    def _scores(self, X) -> np.ndarray:
        raise NotImplementedError

    def _check_fitted(self) -> None:
        if not hasattr(self, "propensity_fit_"):
            raise NotFittedError(
                f"this {type(self).__name__} instance is not fitted yet"
            )

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, column 0 for control and column 1 for treated."""
        self._check_fitted()
        scores = np.asarray(self._scores(X), dtype=float)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> np.ndarray:
        """Most likely class under the fitted propensity model."""
        self._check_fitted()
        return (np.asarray(self._scores(X)) >= 0.5).astype(np.int64)


class GlmPropensity(_PropensityEstimator):
    """Maximum-likelihood GLM propensity model.

    Args:
        terms: design terms; None fits an intercept plus every covariate
            column (named x1..xp).
        link: "logit" or "probit".
        tol: score max-norm tolerance of the IRLS solve.
        max_iter: IRLS iteration cap.
    """

    def __init__(self, terms=None, link="logit", tol=1e-8, max_iter=100):
        self.terms = terms
        self.link = link
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        terms = tuple(self.terms) if self.terms is not None else _main_effect_terms(data)
        spec = ModelSpec(terms, link=self.link)
        fit = fit_glm(
            data.covariates,
            data.treatment,
            spec,
            tol=self.tol,
            max_iter=self.max_iter,
        )
        self.spec_ = spec
        self.glm_fit_ = fit
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = PropensityFit.from_raw(
            predict_propensity(fit, spec, data.covariates),
            method="glm",
            converged=fit.converged,
            diagnostics=dict(fit.diagnostics),
        )
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_propensity(self.glm_fit_, self.spec_, np.asarray(X, dtype=float))


class CbpsPropensity(_PropensityEstimator):
    """Covariate balancing propensity model fitted by two-step GMM.

    Args:
        model_terms: logistic-model design terms; None uses an intercept
            plus every covariate column.
        moment_terms: balance-condition terms; None balances the model
            terms themselves (just-identified exact fit).
    """

    def __init__(self, model_terms=None, moment_terms=None):
        self.model_terms = model_terms
        self.moment_terms = moment_terms

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        model_terms = (
            tuple(self.model_terms)
            if self.model_terms is not None
            else _main_effect_terms(data)
        )
        moment_terms = (
            tuple(self.moment_terms)
            if self.moment_terms is not None
            else model_terms
        )
        fit = fit_cbps(data, model_terms, BalanceSpec(moment_terms))
        diagnostics = dict(fit.diagnostics)
        diagnostics["balance_residual_max"] = float(
            np.max(np.abs(fit.balance_residual))
        )
        if not fit.converged:
            diagnostics.setdefault("reason", "balance_conditions_not_met")
        self.cbps_fit_ = fit
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = PropensityFit.from_raw(
            predict_cbps(fit, data.covariates),
            method="cbps",
            converged=fit.converged,
            diagnostics=diagnostics,
        )
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_cbps(self.cbps_fit_, np.asarray(X, dtype=float))


class BoostedTreePropensity(_PropensityEstimator):
    """Boosted regression-tree propensity model with KS-balance stopping.

    Args:
        depth: tree depth.
        shrinkage: learning rate applied to every tree.
        max_iter: boosting iteration cap.
        bag_fraction: subsampling share per iteration.
        ks_stride: balance-evaluation stride along the boosting path.
        min_leaf: minimum units per leaf.
        random_state: seed for the bagging stream.
    """

    def __init__(
        self,
        depth=3,
        shrinkage=0.01,
        max_iter=10000,
        bag_fraction=0.5,
        ks_stride=100,
        min_leaf=10,
        random_state=0,
    ):
        self.depth = depth
        self.shrinkage = shrinkage
        self.max_iter = max_iter
        self.bag_fraction = bag_fraction
        self.ks_stride = ks_stride
        self.min_leaf = min_leaf
        self.random_state = random_state

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        config = BcartConfig(
            depth=self.depth,
            shrinkage=self.shrinkage,
            max_iter=self.max_iter,
            bag_fraction=self.bag_fraction,
            ks_stride=self.ks_stride,
            min_leaf=self.min_leaf,
        )
        self.model_ = fit_bcart(data, config, RngStream(self.random_state, 0))
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = predict_bcart(self.model_, data.covariates)
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_bcart(self.model_, np.asarray(X, dtype=float)).scores


class SingleIndexPropensity(_PropensityEstimator):
    """Semiparametric single/multi-index propensity model.

    Args:
        q: index dimension.
        bandwidth: optional kernel bandwidth override.
        random_state: seed for the random starting basis.
    """

    def __init__(self, q=1, bandwidth=None, random_state=0):
        self.q = q
        self.bandwidth = bandwidth
        self.random_state = random_state

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        basis, fit = fit_sdr(
            data,
            self.q,
            rng=RngStream(self.random_state, 0),
            bandwidth=self.bandwidth,
        )
        self.train_data_ = data
        self.basis_ = basis
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = fit
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_sdr(
            self.train_data_,
            self.basis_,
            np.asarray(X, dtype=float),
            bandwidth=self.bandwidth,
        ).scores


def _as_specs(candidates, data) -> tuple:
    if candidates is None:
        return (ModelSpec(_main_effect_terms(data)),)
    specs = []
    for item in candidates:
        specs.append(item if isinstance(item, ModelSpec) else ModelSpec(tuple(item)))
    return tuple(specs)


class IntegratedPropensity(_PropensityEstimator):
    """Two-step integrated propensity model over parametric candidates.

    Stage 1 fits every candidate by maximum likelihood; stage 2 mixes their
    log-odds surfaces through a logistic fit of the treatment.

    Args:
        candidates: iterable of term tuples or ``ModelSpec`` objects; None
            uses the single intercept-plus-main-effects candidate.
    """

    def __init__(self, candidates=None):
        self.candidates = candidates

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        specs = _as_specs(self.candidates, data)
        cand = fit_candidates(data.covariates, data.treatment, specs)
        fit = fit_integrated(data.covariates, data.treatment, cand)
        if not np.all(np.isfinite(fit.gamma)):
            reason = fit.diagnostics.get("reason", "integration stage failed")
            raise NoConvergence(f"integrated fit has no usable mixing vector: {reason}")
        diagnostics = dict(fit.diagnostics)
        diagnostics["gamma"] = tuple(float(g) for g in fit.gamma)
        if not fit.converged:
            diagnostics.setdefault("reason", "stage2_not_converged")
        self.candidate_set_ = cand
        self.integrated_fit_ = fit
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = PropensityFit.from_raw(
            predict_integrated(fit, cand, data.covariates),
            method="integrated",
            converged=fit.converged,
            diagnostics=diagnostics,
        )
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_integrated(
            self.integrated_fit_, self.candidate_set_, np.asarray(X, dtype=float)
        )


class ModelAveragePropensity(_PropensityEstimator):
    """Information-criterion weighted average of parametric candidates.

    Args:
        candidates: iterable of term tuples or ``ModelSpec`` objects; None
            uses the single intercept-plus-main-effects candidate.
        criterion: "bic" or "aic" weights.
    """

    def __init__(self, candidates=None, criterion="bic"):
        self.candidates = candidates
        self.criterion = criterion

    def fit(self, X, y):
        data = validate_dataset(treatment=y, covariates=X)
        specs = _as_specs(self.candidates, data)
        cand = fit_candidates(data.covariates, data.treatment, specs)
        fit = fit_ma(cand, criterion=self.criterion)
        diagnostics = {
            "weights": tuple(float(w) for w in fit.weights),
            "ic_values": tuple(float(v) for v in fit.ic_values),
            "criterion": fit.criterion,
        }
        if not cand.all_converged:
            diagnostics["reason"] = "candidate_fits_not_converged"
        self.candidate_set_ = cand
        self.ma_fit_ = fit
        self.classes_ = np.array([0, 1])
        self.propensity_fit_ = PropensityFit.from_raw(
            predict_ma(fit, cand, data.covariates),
            method="ma",
            converged=cand.all_converged,
            diagnostics=diagnostics,
        )
        return self

    def _scores(self, X) -> np.ndarray:
        return predict_ma(
            self.ma_fit_, self.candidate_set_, np.asarray(X, dtype=float)
        )
