import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit, ndtr

from psrobust.errors import RankDeficientDesign, ValidationError
from psrobust.glm import (
    BERNOULLI,
    GlmFit,
    ModelSpec,
    SEPARATION_CAP,
    fit_glm,
    fit_glm_design,
    gaussian_family,
    glm_log_likelihood,
    glm_score,
    information_criterion,
    link_log_odds,
    predict_propensity,
)

from helpers import random_glm_instance, score_gradient_gap


class TestFamilies:
    def test_bernoulli_b_and_derivatives(self):
        th = np.linspace(-20, 20, 201)
        assert np.allclose(BERNOULLI.b(th), np.log1p(np.exp(np.clip(th, None, 30))), atol=1e-9)
        assert np.allclose(BERNOULLI.bdot(th), expit(th))
        # strict convexity: variance function positive everywhere
        assert np.all(BERNOULLI.bddot(th) > 0)

    def test_bernoulli_derivatives_match_numeric(self):
        th = np.linspace(-5, 5, 41)
        h = 1e-6
        num1 = (BERNOULLI.b(th + h) - BERNOULLI.b(th - h)) / (2 * h)
        num2 = (BERNOULLI.bdot(th + h) - BERNOULLI.bdot(th - h)) / (2 * h)
        assert np.allclose(num1, BERNOULLI.bdot(th), atol=1e-8)
        assert np.allclose(num2, BERNOULLI.bddot(th), atol=1e-6)

    def test_gaussian_family(self):
        fam = gaussian_family(2.5)
        th = np.linspace(-3, 3, 13)
        assert np.allclose(fam.b(th), th**2 / 2)
        assert np.allclose(fam.bdot(th), th)
        assert np.all(fam.bddot(th) > 0)
        assert fam.dispersion == 2.5
        with pytest.raises(ValidationError):
            gaussian_family(0.0)


class TestFitLogit:
    def test_intercept_only_closed_form(self):
        # quarter treated: intercept MLE is log(0.25/0.75) = log(1/3)
        t = np.array([1, 0, 0, 0] * 50, dtype=float)
        X = np.zeros((200, 1))
        fit = fit_glm(X, t, ModelSpec(terms=("1",)))
        assert fit.converged
        assert fit.beta[0] == pytest.approx(-1.0986122886681098, abs=1e-9)

    def test_recovers_true_coefficients_and_matches_optimizer(self):
        rng = np.random.default_rng(7)
        n = 5000
        x = rng.normal(size=(n, 1))
        beta_true = np.array([0.3, -0.5])
        D = np.column_stack([np.ones(n), x[:, 0]])
        t = (rng.random(n) < expit(D @ beta_true)).astype(float)
        spec = ModelSpec(terms=("1", "x1"))
        fit = fit_glm(x, t, spec)
        assert fit.converged

        # oracle 1: a generic optimizer on the same likelihood
        res = minimize(
            lambda b: -glm_log_likelihood(D, t, b, "logit"),
            np.zeros(2),
            method="BFGS",
            jac=lambda b: -glm_score(D, t, b, "logit") * n,
            options={"gtol": 1e-10},
        )
        assert np.max(np.abs(fit.beta - res.x)) < 1e-6

        # oracle 2: truth within 3 standard errors from observed information
        p = expit(D @ fit.beta)
        F = (D * (p * (1 - p))[:, None]).T @ D
        se = np.sqrt(np.diag(np.linalg.inv(F)))
        assert np.all(np.abs(fit.beta - beta_true) <= 3 * se)

    def test_score_zero_certificate(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            D, t, _ = random_glm_instance(rng, "logit")
            fit = fit_glm_design(D, t, "logit")
            if fit.converged:
                fresh = glm_score(D, t, fit.beta, "logit")
                assert np.max(np.abs(fresh)) <= 1e-8

    def test_separation_returns_flagged_fit(self):
        # t = 1 exactly when x > 0: likelihood is maximized at infinity
        x = np.linspace(-2, 2, 80)
        t = (x > 0).astype(float)
        fit = fit_glm(x.reshape(-1, 1), t, ModelSpec(terms=("x1",)), max_iter=500)
        assert not fit.converged
        assert fit.diagnostics["reason"] == "separation"
        assert np.max(np.abs(fit.beta)) > SEPARATION_CAP

    def test_rank_deficient_design_raises(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 2))
        X[:, 1] = 2.0 * X[:, 0]
        t = (rng.random(50) < 0.5).astype(float)
        t[0], t[1] = 0, 1
        with pytest.raises(RankDeficientDesign):
            fit_glm(X, t, ModelSpec(terms=("x1", "x2")))


class TestFitProbit:
    def test_recovers_true_coefficients(self):
        rng = np.random.default_rng(11)
        n = 5000
        x = rng.normal(size=(n, 1))
        D = np.column_stack([np.ones(n), x[:, 0]])
        beta_true = np.array([-0.2, 0.7])
        t = (rng.random(n) < ndtr(D @ beta_true)).astype(float)
        fit = fit_glm(x, t, ModelSpec(terms=("1", "x1"), link="probit"))
        assert fit.converged
        from scipy.stats import norm

        eta = D @ fit.beta
        p = np.clip(ndtr(eta), 1e-12, 1 - 1e-12)
        w = norm.pdf(eta) ** 2 / (p * (1 - p))
        F = (D * w[:, None]).T @ D
        se = np.sqrt(np.diag(np.linalg.inv(F)))
        assert np.all(np.abs(fit.beta - beta_true) <= 3 * se)

    def test_log_odds_surface_matches_probabilities(self):
        eta = np.linspace(-4, 4, 33)
        theta = link_log_odds("probit", eta)
        p = ndtr(eta)
        assert np.allclose(expit(theta), p, atol=1e-12)


class TestGradientCheck:
    @pytest.mark.parametrize("link", ["logit", "probit"])
    def test_analytic_score_matches_numeric(self, link):
        rng = np.random.default_rng(17 if link == "logit" else 19)
        for _ in range(25):
            D, t, beta = random_glm_instance(rng, link)
            assert score_gradient_gap(D, t, beta, link) < 1e-6


class TestGaussianIdentity:
    def test_matches_least_squares(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(100, 2))
        y = 1.0 + 0.5 * X[:, 0] - 2.0 * X[:, 1] + rng.normal(size=100)
        fit = fit_glm(X, y, ModelSpec(terms=("1", "x1", "x2"), link="identity"), gaussian_family(1.0))
        D = np.column_stack([np.ones(100), X])
        ols, *_ = np.linalg.lstsq(D, y, rcond=None)
        assert np.allclose(fit.beta, ols, atol=1e-10)
        assert fit.converged

    def test_link_family_pairing_enforced(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(20, 1))
        t = (rng.random(20) < 0.5).astype(float)
        t[0], t[1] = 0, 1
        with pytest.raises(ValidationError):
            fit_glm(X, t, ModelSpec(terms=("x1",), link="identity"))
        with pytest.raises(ValidationError):
            fit_glm(X, t, ModelSpec(terms=("x1",)), gaussian_family(1.0))


class TestPredict:
    def test_scalar_logit_value(self):
        # frozen oracle: 1/(1 + exp(-0.8465)) computed independently
        fit = GlmFit(np.array([0.8465]), 0.0, 1, 1, True, 0)
        p = predict_propensity(fit, ModelSpec(terms=("x1",)), np.array([[1.0]]))
        assert p[0] == pytest.approx(0.69983242258690093, abs=1e-12)

    def test_predictions_clamped(self):
        fit = GlmFit(np.array([100.0]), 0.0, 1, 1, True, 0)
        p = predict_propensity(fit, ModelSpec(terms=("x1",)), np.array([[1.0], [-1.0]]))
        assert p[0] == 1 - 1e-6
        assert p[1] == 1e-6


class TestInformationCriteria:
    def test_formulas(self):
        fit = GlmFit(np.zeros(3), -100.0, 3, 800, True, 5)
        assert information_criterion(fit, "aic") == pytest.approx(206.0, abs=1e-12)
        assert information_criterion(fit, "bic") == pytest.approx(220.05383518300377, abs=1e-12)
        assert information_criterion(fit, "bic") == pytest.approx(
            -2 * fit.log_likelihood + fit.n_params * math.log(fit.n_obs), abs=0
        )
        with pytest.raises(ValidationError):
            information_criterion(fit, "dic")
