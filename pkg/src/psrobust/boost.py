"""Boosted regression trees for the propensity score.

Functional gradient ascent on the Bernoulli log-likelihood: starting from
the marginal log-odds, each iteration fits a depth-limited regression tree
to the current residuals t - e(x) on a bagged subsample and adds a shrunken
copy to the log-odds surface.  The reported iteration is the one minimizing
the mean weighted Kolmogorov-Smirnov balance statistic across covariates;
the KS path is evaluated on a stride grid and then refined iteration by
iteration around the best grid point.

The tree builder and boosting loop are numba-compiled; trees are stored in
packed heap-layout arrays (node 0 is the root, node i has children 2i+1 and
2i+2) so a 10000-iteration model stays small and prediction is a flat array
walk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from scipy.special import expit

from .data import Dataset, PropensityFit, PS_CEIL, PS_FLOOR, as_scores
from .errors import ShapeMismatch, ValidationError
from .rng import RngStream

_NO_MINIMUM = "iteration_cap_without_minimum"


@dataclass(frozen=True)
class BcartConfig:
    """Boosting knobs; defaults follow the package-wide study settings."""

    depth: int = 3
    shrinkage: float = 0.01
    max_iter: int = 10000
    bag_fraction: float = 0.5
    ks_stride: int = 100
    min_leaf: int = 10

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("depth must be at least 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValidationError("shrinkage must be in (0, 1]")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if not 0.0 < self.bag_fraction <= 1.0:
            raise ValidationError("bag_fraction must be in (0, 1]")
        if self.ks_stride < 1:
            raise ValidationError("ks_stride must be at least 1")
        if self.min_leaf < 1:
            raise ValidationError("min_leaf must be at least 1")


@dataclass(frozen=True)
class RegressionTree:
    """One depth-limited tree in packed heap layout.

    ``feature[i] >= 0`` marks an internal node splitting on that feature at
    ``threshold[i]`` (rows with value <= threshold go left); ``is_leaf[i]``
    marks a leaf with prediction ``value[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    is_leaf: np.ndarray
    max_depth: int
    min_leaf_n: int

    @property
    def is_stump(self) -> bool:
        return bool(self.is_leaf[0])

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        out = np.zeros(X.shape[0])
        _add_tree_predictions(
            X,
            self.feature[None, :],
            self.threshold[None, :],
            self.value[None, :],
            self.is_leaf[None, :],
            0,
            1,
            1.0,
            out,
        )
        return out


@dataclass(frozen=True)
class BoostModel:
    """Fitted boosting run.

    Attributes:
        eta0: initial log-odds, log(tbar / (1 - tbar)).
        shrinkage: common multiplier applied to every tree.
        selected_m: iteration chosen by the KS stopping rule; predictions
            use exactly the first ``selected_m`` trees.
        ks_path: tuple of (iteration, mean KS) pairs over every evaluated
            iteration, ascending in iteration.
        ll_path: training Bernoulli log-likelihood after each iteration.
        warning: None, or a code when the KS minimum sat at the iteration
            cap and the path was still falling.
        n_features: covariate count the model was fit on.
    """

    eta0: float
    shrinkage: float
    selected_m: int
    ks_path: tuple
    ll_path: np.ndarray
    warning: str
    n_features: int
    _feature: np.ndarray
    _threshold: np.ndarray
    _value: np.ndarray
    _is_leaf: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return self._feature.shape[0]

    def tree(self, m: int) -> RegressionTree:
        """The tree added at iteration m (0-based)."""
        return RegressionTree(
            feature=self._feature[m],
            threshold=self._threshold[m],
            value=self._value[m],
            is_leaf=self._is_leaf[m],
            max_depth=self.diagnostics["depth"],
            min_leaf_n=self.diagnostics["min_leaf"],
        )

    @property
    def trees(self) -> list:
        return [self.tree(m) for m in range(self.n_trees)]


@numba.njit(cache=True)
def _fit_one_tree(X, sort_idx, resid, in_bag, depth, min_leaf, feat, thr, val, leaf, node_of):
    """Greedy variance-reduction tree on the bagged rows, level by level.

    Ties in split gain go to the lowest feature index, then the lowest
    threshold, because candidates are scanned in that order and only a
    strictly larger gain displaces the incumbent.
    """
    n, p = X.shape
    n_nodes = feat.shape[0]
    for nd in range(n_nodes):
        feat[nd] = -1
        thr[nd] = 0.0
        val[nd] = 0.0
        leaf[nd] = 0
    for i in range(n):
        node_of[i] = 0 if in_bag[i] else -1

    cnt = np.zeros(n_nodes, np.int64)
    tot = np.zeros(n_nodes)
    rmin = np.zeros(n_nodes)
    rmax = np.zeros(n_nodes)
    best_gain = np.zeros(n_nodes)
    best_feat = np.zeros(n_nodes, np.int64)
    best_thr = np.zeros(n_nodes)
    run_cnt = np.zeros(n_nodes, np.int64)
    run_sum = np.zeros(n_nodes)
    last_val = np.zeros(n_nodes)

    for level in range(depth + 1):
        lo = (1 << level) - 1
        hi = (1 << (level + 1)) - 1
        any_active = False
        for nd in range(lo, hi):
            cnt[nd] = 0
            tot[nd] = 0.0
            rmin[nd] = np.inf
            rmax[nd] = -np.inf
            best_gain[nd] = 0.0
            best_feat[nd] = -1
            best_thr[nd] = 0.0
        for i in range(n):
            nd = node_of[i]
            if lo <= nd < hi:
                cnt[nd] += 1
                tot[nd] += resid[i]
                if resid[i] < rmin[nd]:
                    rmin[nd] = resid[i]
                if resid[i] > rmax[nd]:
                    rmax[nd] = resid[i]
                any_active = True
        if not any_active:
            break
        if level < depth:
            for f in range(p):
                for nd in range(lo, hi):
                    run_cnt[nd] = 0
                    run_sum[nd] = 0.0
                    last_val[nd] = 0.0
                for k in range(n):
                    i = sort_idx[k, f]
                    nd = node_of[i]
                    if nd < lo or nd >= hi:
                        continue
                    v = X[i, f]
                    if run_cnt[nd] > 0 and v > last_val[nd]:
                        n_left = run_cnt[nd]
                        n_right = cnt[nd] - n_left
                        if (
                            n_left >= min_leaf
                            and n_right >= min_leaf
                            and rmax[nd] > rmin[nd]
                        ):
                            s_left = run_sum[nd]
                            s_right = tot[nd] - s_left
                            gain = (
                                s_left * s_left / n_left
                                + s_right * s_right / n_right
                                - tot[nd] * tot[nd] / cnt[nd]
                            )
                            if gain > best_gain[nd]:
                                best_gain[nd] = gain
                                best_feat[nd] = f
                                best_thr[nd] = 0.5 * (last_val[nd] + v)
                    run_cnt[nd] += 1
                    run_sum[nd] += resid[i]
                    last_val[nd] = v
        for nd in range(lo, hi):
            if cnt[nd] == 0:
                continue
            if level < depth and best_feat[nd] >= 0 and best_gain[nd] > 0.0:
                feat[nd] = best_feat[nd]
                thr[nd] = best_thr[nd]
            else:
                leaf[nd] = 1
                val[nd] = tot[nd] / cnt[nd]
        for i in range(n):
            nd = node_of[i]
            if lo <= nd < hi:
                if feat[nd] >= 0:
                    if X[i, feat[nd]] <= thr[nd]:
                        node_of[i] = 2 * nd + 1
                    else:
                        node_of[i] = 2 * nd + 2
                else:
                    node_of[i] = -1


@numba.njit(cache=True)
def _add_tree_predictions(X, feat, thr, val, leaf, m_start, m_stop, scale, out):
    """Add scale * tree_m(x) to out for every m in [m_start, m_stop)."""
    n = X.shape[0]
    for m in range(m_start, m_stop):
        for i in range(n):
            nd = 0
            while leaf[m, nd] == 0:
                if X[i, feat[m, nd]] <= thr[m, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            out[i] += scale * val[m, nd]


@numba.njit(cache=True)
def _boost_chunk(X, sort_idx, t, eta, lam, depth, min_leaf, bags, feat, thr, val, leaf, ll):
    """Run bags.shape[0] boosting iterations, updating eta in place."""
    n = X.shape[0]
    chunk = bags.shape[0]
    resid = np.empty(n)
    node_of = np.empty(n, np.int64)
    for it in range(chunk):
        for i in range(n):
            resid[i] = t[i] - 1.0 / (1.0 + np.exp(-eta[i]))
        _fit_one_tree(
            X, sort_idx, resid, bags[it], depth, min_leaf, feat[it], thr[it], val[it], leaf[it], node_of
        )
        total = 0.0
        for i in range(n):
            nd = 0
            while leaf[it, nd] == 0:
                if X[i, feat[it, nd]] <= thr[it, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            eta[i] += lam * val[it, nd]
            if eta[i] > 0.0:
                total += t[i] * eta[i] - (eta[i] + np.log1p(np.exp(-eta[i])))
            else:
                total += t[i] * eta[i] - np.log1p(np.exp(eta[i]))
        ll[it] = total


def fit_tree(X, residuals, depth, min_leaf) -> RegressionTree:
    """Fit one greedy variance-reduction tree.

    Args:
        X: (n, p) covariate matrix.
        residuals: length-n target vector.
        depth: maximum depth (root at depth 0).
        min_leaf: minimum rows per child; when no split satisfies it, the
            node stays a leaf, so min_leaf >= n yields a root-only tree.

    Returns:
        RegressionTree; all-equal residuals produce a single leaf holding
        their common value.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    resid = np.asarray(residuals, dtype=float)
    if X.shape[0] != resid.shape[0]:
        raise ShapeMismatch(
            f"{X.shape[0]} rows of covariates against {resid.shape[0]} residuals"
        )
    n_nodes = (1 << (depth + 1)) - 1
    feat = np.empty(n_nodes, np.int64)
    thr = np.empty(n_nodes)
    val = np.empty(n_nodes)
    leaf = np.empty(n_nodes, np.uint8)
    sort_idx = np.argsort(X, axis=0, kind="stable")
    _fit_one_tree(
        X,
        sort_idx,
        resid,
        np.ones(X.shape[0], np.bool_),
        depth,
        min_leaf,
        feat,
        thr,
        val,
        leaf,
        np.empty(X.shape[0], np.int64),
    )
    return RegressionTree(
        feature=feat, threshold=thr, value=val, is_leaf=leaf, max_depth=depth, min_leaf_n=min_leaf
    )


def _ks_from_orders(X, orders, tie_next, treatment, scores):
    """Mean weighted KS across covariates, reusing per-feature sort orders."""
    t = treatment.astype(float)
    e = scores
    w1 = t / e
    w0 = (1.0 - t) / (1.0 - e)
    w1 = w1 / w1.sum()
    w0 = w0 / w0.sum()
    total = 0.0
    p = X.shape[1]
    for j in range(p):
        order = orders[:, j]
        gaps = np.abs(np.cumsum(w1[order]) - np.cumsum(w0[order]))
        total += float(gaps[tie_next[:, j]].max())
    return total / p


def _tie_masks(X, orders):
    """Positions where the sorted feature value changes next (or ends)."""
    n, p = X.shape
    masks = np.empty((n, p), np.bool_)
    for j in range(p):
        xs = X[orders[:, j], j]
        masks[:-1, j] = xs[:-1] != xs[1:]
        masks[-1, j] = True
    return masks


def ks_balance(data: Dataset, ps) -> float:
    """Mean weighted Kolmogorov-Smirnov balance statistic.

    For each covariate, the KS distance between the IPW-weighted empirical
    CDFs of the treated and control arms (weights t/e and (1-t)/(1-e), each
    arm self-normalized); the statistic is the mean across covariates and
    lies in [0, 1].
    """
    e = as_scores(ps, data.n_units)
    X = data.covariates
    orders = np.argsort(X, axis=0, kind="stable")
    return _ks_from_orders(X, orders, _tie_masks(X, orders), data.treatment, e)


def fit_bcart(data: Dataset, config: BcartConfig = None, rng: RngStream = None) -> BoostModel:
    """Boost trees on the Bernoulli likelihood and pick the best-balance stop.

    Args:
        data: study data (both arms present by construction of Dataset).
        config: boosting knobs; defaults used when None.
        rng: stream driving the bagging draws; required when
            ``bag_fraction < 1``.

    Returns:
        BoostModel with the KS-selected iteration.  When the KS minimum sits
        at the iteration cap, the model carries
        ``warning="iteration_cap_without_minimum"``.
    """
    cfg = config or BcartConfig()
    if cfg.bag_fraction < 1.0 and rng is None:
        raise ValidationError("bagged boosting needs an rng stream")
    X = data.covariates
    t = data.treatment.astype(float)
    n = data.n_units
    tbar = t.mean()
    eta0 = float(np.log(tbar / (1.0 - tbar)))
    lam = cfg.shrinkage
    n_nodes = (1 << (cfg.depth + 1)) - 1

    sort_idx = np.argsort(X, axis=0, kind="stable")
    tie_next = _tie_masks(X, sort_idx)

    def ks_of(eta):
        scores = np.clip(expit(eta), PS_FLOOR, PS_CEIL)
        return _ks_from_orders(X, sort_idx, tie_next, data.treatment, scores)

    feat = np.empty((cfg.max_iter, n_nodes), np.int64)
    thr = np.empty((cfg.max_iter, n_nodes))
    val = np.empty((cfg.max_iter, n_nodes))
    leaf = np.empty((cfg.max_iter, n_nodes), np.uint8)
    ll = np.empty(cfg.max_iter)

    gen = rng.generator() if rng is not None else None
    eta = np.full(n, eta0)
    checkpoints = {0: eta.copy()}
    ks_at = {0: ks_of(eta)}
    done = 0
    while done < cfg.max_iter:
        m = min(cfg.ks_stride, cfg.max_iter - done)
        if cfg.bag_fraction < 1.0:
            bags = gen.random((m, n)) < cfg.bag_fraction
        else:
            bags = np.ones((m, n), np.bool_)
        _boost_chunk(
            X,
            sort_idx,
            t,
            eta,
            lam,
            cfg.depth,
            cfg.min_leaf,
            bags,
            feat[done : done + m],
            thr[done : done + m],
            val[done : done + m],
            leaf[done : done + m],
            ll[done : done + m],
        )
        done += m
        checkpoints[done] = eta.copy()
        ks_at[done] = ks_of(eta)

    # refine iteration by iteration around the best grid point
    best_grid = min(ks_at, key=lambda k: (ks_at[k], k))
    lo = max(best_grid - cfg.ks_stride + 1, 0)
    hi = min(best_grid + cfg.ks_stride - 1, cfg.max_iter)
    start = max(k for k in checkpoints if k <= lo)
    eta_run = checkpoints[start].copy()
    for j in range(start + 1, hi + 1):
        _add_tree_predictions(X, feat, thr, val, leaf, j - 1, j, lam, eta_run)
        if j >= lo and j not in ks_at:
            ks_at[j] = ks_of(eta_run)

    ks_path = tuple(sorted(ks_at.items()))
    selected_m, ks_min = min(ks_path, key=lambda kv: (kv[1], kv[0]))
    warning = _NO_MINIMUM if selected_m == cfg.max_iter else None
    return BoostModel(
        eta0=eta0,
        shrinkage=lam,
        selected_m=int(selected_m),
        ks_path=ks_path,
        ll_path=ll,
        warning=warning,
        n_features=X.shape[1],
        _feature=feat,
        _threshold=thr,
        _value=val,
        _is_leaf=leaf,
        diagnostics={
            "depth": cfg.depth,
            "min_leaf": cfg.min_leaf,
            "ks_min": float(ks_min),
            "bag_fraction": cfg.bag_fraction,
        },
    )


def predict_bcart(model: BoostModel, X) -> PropensityFit:
    """Scores from the first ``selected_m`` trees, clamped.

    Raises:
        ShapeMismatch: X has a different covariate count than the fit data.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != model.n_features:
        raise ShapeMismatch(
            f"model was fit on {model.n_features} covariates, got {X.shape[1]}"
        )
    eta = np.full(X.shape[0], model.eta0)
    _add_tree_predictions(
        X,
        model._feature,
        model._threshold,
        model._value,
        model._is_leaf,
        0,
        model.selected_m,
        model.shrinkage,
        eta,
    )
    raw = expit(eta)
    diagnostics = {"selected_m": float(model.selected_m), "ks_min": model.diagnostics["ks_min"]}
    if model.warning is not None:
        diagnostics["reason"] = model.warning
    return PropensityFit.from_raw(
        raw, method="bcart", converged=model.warning is None, diagnostics=diagnostics
    )
