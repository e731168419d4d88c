import dataclasses

import numpy as np
import pytest
from scipy.special import expit

from psrobust.boost import (
    BcartConfig,
    BoostModel,
    RegressionTree,
    fit_bcart,
    fit_tree,
    ks_balance,
    predict_bcart,
)
from psrobust.data import validate_dataset
from psrobust.errors import ShapeMismatch, ValidationError
from psrobust.rng import RngStream


def exhaustive_depth1_split(X, r, min_leaf):
    """Independent brute-force search over every distinct-value boundary."""
    n, p = X.shape
    best = (0.0, -1, 0.0)
    for f in range(p):
        xs = np.unique(X[:, f])
        for a, b in zip(xs[:-1], xs[1:]):
            thr = 0.5 * (a + b)
            left = X[:, f] <= thr
            nl = int(left.sum())
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = r[left].sum()
            sr = r[~left].sum()
            gain = sl * sl / nl + sr * sr / nr - r.sum() ** 2 / n
            if gain > best[0]:
                best = (gain, f, thr)
    return best


class TestFitTree:
    def test_constant_residuals_give_single_leaf(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(100, 3))
        tree = fit_tree(X, np.full(100, 0.7), depth=3, min_leaf=10)
        assert tree.is_stump
        assert abs(tree.value[0] - 0.7) <= 1e-12

    def test_zero_residuals_give_zero_stump(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 2))
        tree = fit_tree(X, np.zeros(60), depth=3, min_leaf=5)
        assert tree.is_stump
        assert tree.value[0] == 0.0
        assert np.all(tree.predict(X) == 0.0)

    def test_threshold_pattern_recovered_at_depth_one(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(200, 3))
        r = (X[:, 0] > 0).astype(float)
        tree = fit_tree(X, r, depth=1, min_leaf=5)
        assert tree.feature[0] == 0
        assert abs(tree.threshold[0]) < 0.1
        assert abs(tree.value[1] - 0.0) <= 1e-12
        assert abs(tree.value[2] - 1.0) <= 1e-12

    def test_min_leaf_equal_n_gives_root_only(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(80, 2))
        r = rng.normal(size=80)
        tree = fit_tree(X, r, depth=3, min_leaf=80)
        assert tree.is_stump
        assert abs(tree.value[0] - r.mean()) <= 1e-12

    def test_matches_exhaustive_split_search(self):
        for k in range(25):
            rng = np.random.default_rng(100 + k)
            X = rng.normal(size=(60, 3))
            r = rng.normal(size=60)
            gain, f, thr = exhaustive_depth1_split(X, r, 5)
            tree = fit_tree(X, r, depth=1, min_leaf=5)
            if f < 0:
                assert tree.is_stump
            else:
                assert tree.feature[0] == f
                assert abs(tree.threshold[0] - thr) <= 1e-12

    def test_tied_gains_break_to_lowest_feature(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=120)
        X = np.column_stack([x, x])
        r = (x > 0).astype(float)
        tree = fit_tree(X, r, depth=1, min_leaf=5)
        assert tree.feature[0] == 0

    def test_every_row_maps_to_a_finite_leaf(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(300, 4))
        r = rng.normal(size=300)
        tree = fit_tree(X, r, depth=3, min_leaf=10)
        preds = tree.predict(rng.normal(size=(500, 4)))
        assert preds.shape == (500,)
        assert np.all(np.isfinite(preds))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            fit_tree(np.zeros((10, 2)), np.zeros(9), depth=1, min_leaf=2)


class TestKsBalance:
    def test_identical_arms_constant_weights_zero(self):
        x = np.arange(12.0).reshape(-1, 1)
        X = np.vstack([x, x])
        t = np.r_[np.ones(12), np.zeros(12)].astype(int)
        data = validate_dataset(treatment=t, covariates=X)
        assert ks_balance(data, np.full(24, 0.5)) <= 1e-12

    def test_disjoint_supports_give_one(self):
        t = np.array([1, 1, 1, 0, 0, 0])
        X = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).reshape(-1, 1)
        data = validate_dataset(treatment=t, covariates=X)
        assert abs(ks_balance(data, np.full(6, 0.5)) - 1.0) <= 1e-12

    def test_six_unit_hand_oracle(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).reshape(-1, 1)
        t = np.array([1, 0, 1, 0, 1, 0])
        e = np.array([0.8, 0.3, 0.6, 0.5, 0.4, 0.7])
        data = validate_dataset(treatment=t, covariates=x)
        # treated weights 1/e at x = 1, 3, 5; control weights 1/(1-e) at 2, 4, 6
        s1 = 1 / 0.8 + 1 / 0.6 + 1 / 0.4
        s0 = 1 / 0.7 + 1 / 0.5 + 1 / 0.3
        f1 = np.array([1 / 0.8, 1 / 0.8, 1 / 0.8 + 1 / 0.6, 1 / 0.8 + 1 / 0.6, s1, s1]) / s1
        f0 = np.array([0.0, 1 / 0.7, 1 / 0.7, 1 / 0.7 + 1 / 0.5, 1 / 0.7 + 1 / 0.5, s0]) / s0
        expected = np.max(np.abs(f1 - f0))
        assert abs(ks_balance(data, e) - expected) <= 1e-12

    def test_mean_across_covariates(self):
        rng = np.random.default_rng(7)
        n = 100
        t = np.r_[np.ones(n // 2), np.zeros(n // 2)].astype(int)
        X = rng.normal(size=(n, 3))
        e = np.clip(rng.beta(2, 2, size=n), 0.1, 0.9)
        data = validate_dataset(treatment=t, covariates=X)
        per_col = [
            ks_balance(validate_dataset(treatment=t, covariates=X[:, j]), e)
            for j in range(3)
        ]
        assert abs(ks_balance(data, e) - np.mean(per_col)) <= 1e-12


def structured_sample(n, seed, p=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    e = expit(1.2 * X[:, 0] - 0.8 * X[:, 1])
    t = (rng.random(n) < e).astype(int)
    return validate_dataset(treatment=t, covariates=X)


class TestFitBcart:
    def test_deterministic_for_same_seed(self):
        data = structured_sample(300, seed=8)
        cfg = BcartConfig(max_iter=400)
        a = fit_bcart(data, cfg, RngStream(9, 0))
        b = fit_bcart(data, cfg, RngStream(9, 0))
        assert a.selected_m == b.selected_m
        assert a.ks_path == b.ks_path
        assert np.array_equal(a.ll_path, b.ll_path)
        assert np.array_equal(
            predict_bcart(a, data.covariates).scores,
            predict_bcart(b, data.covariates).scores,
        )

    def test_different_seed_changes_bags(self):
        data = structured_sample(300, seed=8)
        cfg = BcartConfig(max_iter=400)
        a = fit_bcart(data, cfg, RngStream(9, 0))
        c = fit_bcart(data, cfg, RngStream(10, 0))
        assert not np.array_equal(a.ll_path, c.ll_path)

    def test_likelihood_ascent_full_sample(self):
        data = structured_sample(400, seed=11)
        cfg = BcartConfig(bag_fraction=1.0, max_iter=600)
        model = fit_bcart(data, cfg)
        assert np.all(np.diff(model.ll_path) >= -1e-12)

    def test_eta0_is_marginal_log_odds(self):
        data = structured_sample(200, seed=12)
        model = fit_bcart(data, BcartConfig(max_iter=100), RngStream(1, 0))
        tbar = data.treatment.mean()
        assert abs(model.eta0 - np.log(tbar / (1 - tbar))) <= 1e-15

    def test_ks_path_minimum_is_selected(self):
        data = structured_sample(400, seed=13)
        model = fit_bcart(data, BcartConfig(max_iter=800), RngStream(2, 0))
        values = dict(model.ks_path)
        assert values[model.selected_m] == min(values.values())
        assert all(0.0 <= v <= 1.0 for v in values.values())
        iters = [m for m, _ in model.ks_path]
        assert iters == sorted(iters)

    def test_pure_noise_keeps_mean_score_at_tbar(self):
        rng = np.random.default_rng(33)
        n = 600
        X = rng.normal(size=(n, 4))
        t = (rng.random(n) < 0.45).astype(int)
        data = validate_dataset(treatment=t, covariates=X)
        model = fit_bcart(data, BcartConfig(max_iter=4000), RngStream(3, 0))
        assert model.warning is None
        assert 0 < model.selected_m < 4000
        assert model.diagnostics["ks_min"] <= dict(model.ks_path)[0]
        scores = predict_bcart(model, X).scores
        assert abs(scores.mean() - t.mean()) <= 0.01

    def test_iteration_cap_sets_warning(self):
        rng = np.random.default_rng(34)
        n = 500
        X = rng.normal(size=(n, 3))
        t = (rng.random(n) < expit(1.5 * X[:, 0] - X[:, 1])).astype(int)
        data = validate_dataset(treatment=t, covariates=X)
        model = fit_bcart(data, BcartConfig(max_iter=150), RngStream(4, 0))
        assert model.selected_m == 150
        assert model.warning == "iteration_cap_without_minimum"
        fit = predict_bcart(model, X)
        assert not fit.converged
        assert fit.diagnostics["reason"] == "iteration_cap_without_minimum"

    def test_bagging_requires_rng(self):
        data = structured_sample(100, seed=14)
        with pytest.raises(ValidationError):
            fit_bcart(data, BcartConfig(max_iter=10))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            BcartConfig(depth=0)
        with pytest.raises(ValidationError):
            BcartConfig(shrinkage=0.0)
        with pytest.raises(ValidationError):
            BcartConfig(bag_fraction=1.5)
        with pytest.raises(ValidationError):
            BcartConfig(min_leaf=0)


class TestPredictBcart:
    def test_zero_trees_predict_tbar(self):
        data = structured_sample(200, seed=15)
        model = fit_bcart(data, BcartConfig(max_iter=100), RngStream(5, 0))
        m0 = dataclasses.replace(model, selected_m=0)
        scores = predict_bcart(m0, data.covariates).scores
        assert np.max(np.abs(scores - data.treatment.mean())) <= 1e-12

    def test_prediction_uses_exactly_selected_trees(self):
        data = structured_sample(250, seed=16)
        model = fit_bcart(data, BcartConfig(max_iter=300), RngStream(6, 0))
        eta = np.full(data.n_units, model.eta0)
        for j in range(model.selected_m):
            eta += model.shrinkage * model.tree(j).predict(data.covariates)
        manual = np.clip(expit(eta), 1e-6, 1 - 1e-6)
        scores = predict_bcart(model, data.covariates).scores
        assert np.max(np.abs(manual - scores)) <= 1e-12

    def test_scores_clamped_open_interval(self):
        data = structured_sample(200, seed=17)
        model = fit_bcart(data, BcartConfig(max_iter=200), RngStream(7, 0))
        fit = predict_bcart(model, data.covariates)
        assert np.all((fit.scores > 0.0) & (fit.scores < 1.0))
        assert np.all(np.isfinite(fit.raw_scores))

    def test_wrong_width_rejected(self):
        data = structured_sample(100, seed=18)
        model = fit_bcart(data, BcartConfig(max_iter=50), RngStream(8, 0))
        with pytest.raises(ShapeMismatch):
            predict_bcart(model, np.zeros((5, 7)))
