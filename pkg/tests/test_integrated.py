import math

import numpy as np
import pytest
from scipy.special import expit

from psrobust.errors import (
    CollinearPredictors,
    IdentificationFailure,
    InvalidSimplex,
    NotADistribution,
)
from psrobust.glm import GlmFit, ModelSpec, fit_glm, glm_score
from psrobust.integrated import (
    CandidateSet,
    IntegratedFit,
    fit_candidates,
    fit_integrated,
    fit_ma,
    kl_gap_discrete,
    predict_integrated,
    predict_ma,
)

THREE_CANDIDATES = (
    ModelSpec(("x2", "x3", "x4")),
    ModelSpec(("x1", "x2", "x1*x2")),
    ModelSpec(("x2", "x4", "x2*x4")),
)


def draw_true_candidate1(rng, n):
    """Covariates plus treatment from candidate 1's exact model."""
    X = rng.normal(size=(n, 4))
    eta = X[:, 1] * 0.6 - X[:, 2] * 0.4 + X[:, 3] * 0.5
    t = (rng.random(n) < expit(eta)).astype(float)
    return X, t


class TestCandidates:
    def test_single_candidate_matches_fit_glm(self):
        rng = np.random.default_rng(0)
        X, t = draw_true_candidate1(rng, 400)
        spec = ModelSpec(("x2", "x3"))
        cand = fit_candidates(X, t, [spec])
        direct = fit_glm(X, t, spec)
        assert np.array_equal(cand.fits[0].beta, direct.beta)
        assert cand.n_candidates == 1

    def test_paper_style_trio_converges(self):
        rng = np.random.default_rng(1)
        X, t = draw_true_candidate1(rng, 1500)
        cand = fit_candidates(X, t, THREE_CANDIDATES)
        assert cand.all_converged

    def test_duplicated_spec_fails_identification(self):
        rng = np.random.default_rng(2)
        X, t = draw_true_candidate1(rng, 300)
        cand = fit_candidates(X, t, [ModelSpec(("x2",)), ModelSpec(("x2",))])
        with pytest.raises(IdentificationFailure):
            fit_integrated(X, t, cand)


class TestIntegratedFit:
    def test_single_logit_candidate_gives_gamma_one(self):
        rng = np.random.default_rng(3)
        X, t = draw_true_candidate1(rng, 600)
        cand = fit_candidates(X, t, [ModelSpec(("x2", "x3", "x4"))])
        fit = fit_integrated(X, t, cand)
        assert fit.converged
        assert abs(fit.gamma[0] - 1.0) < 1e-6

    def test_true_candidate_first_gamma_concentrates(self):
        rng = np.random.default_rng(4)
        gammas = []
        for _ in range(11):
            X, t = draw_true_candidate1(rng, 5000)
            cand = fit_candidates(X, t, THREE_CANDIDATES)
            fit = fit_integrated(X, t, cand)
            assert fit.converged
            gammas.append(fit.gamma)
        med = np.median(np.array(gammas), axis=0)
        assert abs(med[0] - 1.0) < 0.2
        assert abs(med[1]) < 0.2
        assert abs(med[2]) < 0.2

    def test_stage2_score_and_concavity_certificates(self):
        rng = np.random.default_rng(5)
        for _ in range(8):
            X, t = draw_true_candidate1(rng, 800)
            cand = fit_candidates(X, t, THREE_CANDIDATES)
            fit = fit_integrated(X, t, cand)
            if not fit.converged:
                continue
            theta = cand.log_odds_matrix(X)
            fresh = glm_score(theta, t, fit.gamma, "logit")
            assert np.max(np.abs(fresh)) <= 1e-8
            assert fit.diagnostics["hessian_max_eig"] < 0.0

    def test_noise_candidates_track_base_rate(self):
        # no treatment signal: the integrated propensity surface stays flat
        # near the sample base rate
        rng = np.random.default_rng(6)
        n = 5000
        X = rng.normal(size=(n, 2))
        t = (rng.random(n) < 0.5).astype(float)
        cand = fit_candidates(X, t, [ModelSpec(("x1",)), ModelSpec(("x2",))])
        fit = fit_integrated(X, t, cand)
        assert fit.converged
        p = predict_integrated(fit, cand, X)
        assert np.max(np.abs(p - t.mean())) < 0.1

    def test_root_n_shrinkage_of_gamma1(self):
        rng = np.random.default_rng(7)
        sds = {}
        for n in (800, 3200):
            g1 = []
            for _ in range(150):
                X, t = draw_true_candidate1(rng, n)
                cand = fit_candidates(X, t, THREE_CANDIDATES)
                fit = fit_integrated(X, t, cand)
                if fit.converged:
                    g1.append(fit.gamma[0])
            sds[n] = np.std(g1, ddof=1)
        assert sds[3200] <= 0.65 * sds[800]

    def test_collinear_thetas_raise(self):
        rng = np.random.default_rng(8)
        X, t = draw_true_candidate1(rng, 200)
        # hand-built fits whose log-odds columns are exactly dependent:
        # theta3 = theta1 + theta2
        specs = (ModelSpec(("x1",)), ModelSpec(("x2",)), ModelSpec(("x1", "x2")))
        fits = (
            GlmFit(np.array([0.5]), -1.0, 1, 200, True, 2),
            GlmFit(np.array([-0.3]), -1.0, 1, 200, True, 2),
            GlmFit(np.array([0.5, -0.3]), -1.0, 2, 200, True, 2),
        )
        cand = CandidateSet(specs=specs, fits=fits)
        with pytest.raises(CollinearPredictors):
            fit_integrated(X, t, cand)

    def test_stage1_failure_flagged(self):
        # candidate 1 separates perfectly, so its MLE diverges
        x = np.linspace(-2, 2, 120)
        rng = np.random.default_rng(9)
        X = np.column_stack([x, rng.normal(size=120)])
        t = (x > 0).astype(float)
        cand = fit_candidates(X, t, [ModelSpec(("x1",)), ModelSpec(("x2",))], max_iter=300)
        assert not cand.all_converged
        fit = fit_integrated(X, t, cand)
        assert not fit.converged
        assert "stage1" in fit.diagnostics["reason"]


class TestPredictIntegrated:
    def _const_candidates(self, a, b):
        specs = (ModelSpec(("1",)), ModelSpec(("x1",)))
        fits = (
            GlmFit(np.array([a]), 0.0, 1, 10, True, 1),
            GlmFit(np.array([b]), 0.0, 1, 10, True, 1),
        )
        return CandidateSet(specs=specs, fits=fits)

    def test_zero_gamma_gives_half(self):
        cand = self._const_candidates(1.5, 2.0)
        fit = IntegratedFit(np.zeros(2), True, 1, 0.0)
        X = np.linspace(-3, 3, 7).reshape(-1, 1)
        assert np.allclose(predict_integrated(fit, cand, X), 0.5)

    def test_single_candidate_identity(self):
        rng = np.random.default_rng(10)
        X, t = draw_true_candidate1(rng, 300)
        spec = ModelSpec(("x2", "x3", "x4"))
        cand = fit_candidates(X, t, [spec])
        fit = IntegratedFit(np.array([1.0]), True, 1, 0.0)
        from psrobust.glm import predict_propensity

        assert np.allclose(
            predict_integrated(fit, cand, X),
            predict_propensity(cand.fits[0], spec, X),
            atol=1e-15,
        )

    def test_cancellation(self):
        # theta1 = 2 and theta2 = -2 everywhere, gamma = (1/2, 1/2)
        specs = (ModelSpec(("1",)), ModelSpec(("1", "x1")))
        fits = (
            GlmFit(np.array([2.0]), 0.0, 1, 10, True, 1),
            GlmFit(np.array([-2.0, 0.0]), 0.0, 2, 10, True, 1),
        )
        cand = CandidateSet(specs=specs, fits=fits)
        fit = IntegratedFit(np.array([0.5, 0.5]), True, 1, 0.0)
        X = np.array([[0.3], [111.0]])
        assert np.allclose(predict_integrated(fit, cand, X), 0.5, atol=1e-15)


class TestMa:
    def _cand_with_ics(self, lls, n=100):
        # icv for bic with q=1: -2*ll + log(n); craft lls to hit target ICs
        specs = tuple(ModelSpec(("1",)) for _ in lls)
        fits = tuple(GlmFit(np.array([0.0]), ll, 1, n, True, 1) for ll in lls)
        return CandidateSet(specs=specs, fits=fits)

    def test_equal_ics_uniform(self):
        cand = self._cand_with_ics([-50.0, -50.0, -50.0])
        fit = fit_ma(cand, "bic")
        assert np.allclose(fit.weights, 1.0 / 3.0, atol=1e-15)

    def test_two_point_ratio(self):
        # IC gap of 2 gives weights proportional to (1, e^-1)
        lls = [-50.0, -51.0]  # BIC difference exactly 2
        cand = self._cand_with_ics(lls)
        fit = fit_ma(cand, "bic")
        w1 = 1.0 / (1.0 + math.exp(-1.0))
        assert fit.weights[0] == pytest.approx(w1, abs=1e-14)
        assert fit.weights[1] == pytest.approx(1.0 - w1, abs=1e-14)

    def test_huge_gap_stays_finite_and_normalized(self):
        cand = self._cand_with_ics([-50.0, -5000.0])
        fit = fit_ma(cand, "bic")
        assert np.all(np.isfinite(fit.weights))
        assert fit.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert fit.weights[0] == pytest.approx(1.0, abs=1e-12)
        assert fit.weights[1] >= 0.0

    def test_weights_on_fitted_candidates_sum_to_one(self):
        rng = np.random.default_rng(11)
        X, t = draw_true_candidate1(rng, 900)
        cand = fit_candidates(X, t, THREE_CANDIDATES)
        fit = fit_ma(cand, "bic")
        assert fit.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(fit.weights >= 0.0)
        aic = fit_ma(cand, "aic")
        assert aic.criterion == "aic"
        assert aic.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_prediction_is_pointwise_convex_combination(self):
        rng = np.random.default_rng(12)
        X, t = draw_true_candidate1(rng, 700)
        cand = fit_candidates(X, t, THREE_CANDIDATES)
        fit = fit_ma(cand, "bic")
        from psrobust.glm import link_mean

        probs = np.column_stack(
            [link_mean(s.link, s.design(X) @ f.beta) for s, f in zip(cand.specs, cand.fits)]
        )
        mixed = predict_ma(fit, cand, X)
        assert np.all(mixed >= probs.min(axis=1) - 1e-12)
        assert np.all(mixed <= probs.max(axis=1) + 1e-12)


def brute_force_divergences(px, q, thetas, gamma):
    """Plain-loop oracle for the discrete divergence pair."""

    def dive(theta_vec):
        tot = 0.0
        for j in range(len(px)):
            for tv in (0, 1):
                gtrue = q[j] if tv == 1 else 1.0 - q[j]
                if gtrue == 0.0:
                    continue
                p1 = 1.0 / (1.0 + math.exp(-theta_vec[j]))
                f = p1 if tv == 1 else 1.0 - p1
                tot += px[j] * gtrue * (math.log(gtrue) - math.log(f))
        return tot

    K = len(gamma)
    lhs = dive([sum(gamma[k] * thetas[j][k] for k in range(K)) for j in range(len(px))])
    rhs = sum(gamma[k] * dive([thetas[j][k] for j in range(len(px))]) for k in range(K))
    return lhs, rhs


class TestKlGap:
    def test_vertex_equality(self):
        px = np.array([0.2, 0.5, 0.3])
        q = np.array([0.3, 0.6, 0.8])
        th = np.array([[0.1, -1.0], [0.4, 0.2], [1.5, 0.9]])
        lhs, rhs = kl_gap_discrete(px, q, th, np.array([1.0, 0.0]))
        assert lhs == pytest.approx(rhs, abs=1e-15)
        lhs2, rhs2 = kl_gap_discrete(px, q, th, np.array([0.0, 1.0]))
        assert lhs2 == pytest.approx(rhs2, abs=1e-15)

    def test_identical_candidates_equality(self):
        px = np.array([0.25, 0.75])
        q = np.array([0.4, 0.7])
        col = np.array([0.3, -0.8])
        th = np.column_stack([col, col])
        for g1 in (0.0, 0.3, 0.9):
            lhs, rhs = kl_gap_discrete(px, q, th, np.array([g1, 1.0 - g1]))
            assert lhs == pytest.approx(rhs, abs=1e-13)

    def test_random_instances_inequality_and_oracle_match(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            G = int(rng.integers(2, 6))
            K = int(rng.integers(2, 4))
            px = rng.dirichlet(np.ones(G))
            q = rng.uniform(0.05, 0.95, size=G)
            th = rng.uniform(-4.0, 4.0, size=(G, K))
            gamma = rng.dirichlet(np.ones(K))
            lhs, rhs = kl_gap_discrete(px, q, th, gamma)
            assert lhs <= rhs + 1e-12
            blhs, brhs = brute_force_divergences(px, q, th, gamma)
            assert lhs == pytest.approx(blhs, rel=1e-10, abs=1e-12)
            assert rhs == pytest.approx(brhs, rel=1e-10, abs=1e-12)

    def test_degenerate_conditionals_allowed(self):
        px = np.array([0.5, 0.5])
        q = np.array([0.0, 1.0])  # deterministic arms use the 0*log0 convention
        th = np.array([[0.0, 1.0], [0.5, -0.5]])
        lhs, rhs = kl_gap_discrete(px, q, th, np.array([0.5, 0.5]))
        assert np.isfinite(lhs) and np.isfinite(rhs)
        assert lhs <= rhs + 1e-12

    def test_validation_errors(self):
        px = np.array([0.5, 0.6])
        q = np.array([0.5, 0.5])
        th = np.zeros((2, 2))
        ok_g = np.array([0.5, 0.5])
        with pytest.raises(NotADistribution):
            kl_gap_discrete(px, q, th, ok_g)
        with pytest.raises(NotADistribution):
            kl_gap_discrete(np.array([0.5, 0.5]), np.array([-0.1, 0.5]), th, ok_g)
        with pytest.raises(InvalidSimplex):
            kl_gap_discrete(np.array([0.5, 0.5]), q, th, np.array([0.7, 0.7]))
        with pytest.raises(InvalidSimplex):
            kl_gap_discrete(np.array([0.5, 0.5]), q, th, np.array([-0.2, 1.2]))
