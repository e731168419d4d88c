"""Semiparametric single-index propensity estimation.

The propensity score is modeled as ``expit(eta(X @ beta))`` with an unknown
link ``eta`` and a p x q index matrix ``beta`` held in an identity gauge:
the top q x q block is pinned to the identity and only the lower
(p - q) x q block carries free parameters.  Fitting is two-step.  The
initial step solves an estimating equation under the working link
``eta(u) = sum(u)``, using a leave-one-out Nadaraya-Watson estimate of
E[X | X @ beta].  The efficient step plugs local kernel-logistic estimates
of ``eta`` and its gradient into the efficient score and re-solves for the
free block.

Per-unit kernel failures (empty neighborhoods, local separation) never
produce silent non-finite numbers: affected points receive finite fallback
values plus a reason code, and fits carry the counts in their diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
from scipy.spatial.distance import cdist
from scipy.special import expit, logit

from .data import PS_CEIL, PS_FLOOR, Dataset, PropensityFit
from .errors import (
    LengthMismatch,
    NoConvergence,
    NonFiniteValue,
    ShapeMismatch,
    ValidationError,
)
from .rng import RngStream

EMPTY_MASS = 1e-12
INITIAL_TOL = 1e-6
SCORE_TOL = 1e-5

_NEWTON_MAX_ITER = 60
_NEWTON_TOL = 1e-10
_MAX_HALVINGS = 30
_STEP_CAP = 4.0
_HESSIAN_RIDGE = 1e-10
_MAX_RANDOM_RESTARTS = 4
_START_SPREAD = 0.5

REASON_EMPTY = "empty_neighborhood"
REASON_SEPARATION = "local_separation"
REASON_MAX_ITER = "newton_max_iter"


def _as_matrix(values, name: str) -> np.ndarray:
    """Coerce to a 2-d float matrix, treating a 1-d array as one column."""
    out = np.asarray(values, dtype=float)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2:
        raise ValidationError(f"{name} must be 1-d or 2-d, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{name} contains non-finite values")
    return out


def _check_binary(treatment) -> np.ndarray:
    """Validate a 0/1 vector without requiring both arms to be present."""
    t = np.asarray(treatment)
    if t.ndim != 1:
        raise ValidationError("treatment must be a 1-d vector")
    tf = t.astype(float, copy=False)
    if not np.all(np.isfinite(tf)):
        raise NonFiniteValue("treatment has a non-finite value")
    if not np.all(np.isin(tf, (0.0, 1.0))):
        raise ValidationError("treatment must contain only 0 and 1")
    return tf


def _bandwidth_vector(bandwidth, q: int) -> np.ndarray:
    """Broadcast a scalar or per-dimension bandwidth to a validated q-vector."""
    h = np.asarray(bandwidth, dtype=float).ravel()
    if h.size == 1:
        h = np.full(q, h[0])
    if h.shape != (q,):
        raise ValidationError(f"bandwidth must be a scalar or length-{q} vector")
    if not np.all(np.isfinite(h)) or np.any(h <= 0.0):
        raise ValidationError("bandwidth entries must be positive and finite")
    return h


def rule_of_thumb_bandwidth(index_values) -> np.ndarray:
    """Per-dimension bandwidth sd(index) * n^(-1/5).

    Dimensions with zero spread fall back to unit scale so the bandwidth
    stays positive.

    Args:
        index_values: (n, q) index matrix (a 1-d array is one dimension).

    Returns:
        Length-q array of bandwidths.
    """
    u = _as_matrix(index_values, "index_values")
    sd = u.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return sd * u.shape[0] ** (-0.2)


@dataclass(frozen=True)
class IndexBasis:
    """Index matrix in the identity gauge.

    Attributes:
        beta: (p, q) matrix whose top q x q block is exactly the identity;
            the lower (p - q) x q block holds the free parameters.
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 2:
            raise ValidationError(f"beta must be 2-d, got shape {beta.shape}")
        p, q = beta.shape
        if q < 1 or p <= q:
            raise ValidationError(f"index needs p > q >= 1, got p={p}, q={q}")
        if not np.all(np.isfinite(beta)):
            raise NonFiniteValue("beta contains non-finite values")
        if not np.array_equal(beta[:q, :], np.eye(q)):
            raise ValidationError("top q x q block of beta must be the identity")
        beta = beta.copy()
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def q(self) -> int:
        return self.beta.shape[1]

    @property
    def n_free(self) -> int:
        return (self.p - self.q) * self.q

    @property
    def vecl(self) -> np.ndarray:
        """Free lower block, vectorized column by column."""
        return self.beta[self.q:, :].ravel(order="F")

    @classmethod
    def from_vecl(cls, values, p: int, q: int) -> "IndexBasis":
        """Assemble a basis from its free parameters.

        Args:
            values: length (p - q) * q vector, column-major lower block.
            p: number of covariate rows.
            q: number of index dimensions.
        """
        free = np.asarray(values, dtype=float).ravel()
        if free.shape != ((p - q) * q,):
            raise ValidationError(
                f"expected {(p - q) * q} free parameters, got {free.shape[0]}"
            )
        beta = np.vstack([np.eye(q), free.reshape((p - q, q), order="F")])
        return cls(beta)

    def index(self, covariates) -> np.ndarray:
        """Project covariates onto the index space: X @ beta.

        Args:
            covariates: (n, p) matrix with the same column count as beta rows.

        Returns:
            (n, q) index values.
        """
        X = _as_matrix(covariates, "covariates")
        if X.shape[1] != self.p:
            raise ShapeMismatch(
                f"covariates have {X.shape[1]} columns, basis expects {self.p}"
            )
        return X @ self.beta


def random_basis(p: int, q: int, rng: np.random.Generator) -> IndexBasis:
    """Draw a random identity-gauge basis with free entries uniform on
    (-0.5, 0.5).

    Args:
        p: covariate dimension.
        q: index dimension, 1 <= q < p.
        rng: numpy generator supplying the draw.
    """
    if q < 1 or p <= q:
        raise ValidationError(f"index needs p > q >= 1, got p={p}, q={q}")
    free = rng.uniform(-_START_SPREAD, _START_SPREAD, size=(p - q) * q)
    return IndexBasis.from_vecl(free, p, q)


def _kernel_matrix(eval_scaled: np.ndarray, data_scaled: np.ndarray) -> np.ndarray:
    """Gaussian product-kernel weights between two sets of scaled points."""
    return np.exp(-0.5 * cdist(eval_scaled, data_scaled, "sqeuclidean"))


def nw_conditional_mean(covariates, index_values, bandwidth):
    """Leave-one-out Nadaraya-Watson estimate of E[X | index] per unit.

    Uses a Gaussian product kernel over the index dimensions.  Units whose
    leave-one-out kernel mass falls below ``EMPTY_MASS`` are flagged and
    filled with the full-sample column means instead of a 0/0 ratio.

    Args:
        covariates: (n, p) matrix whose conditional means are estimated.
        index_values: (n, q) conditioning index (1-d taken as one column).
        bandwidth: positive scalar or length-q vector of kernel bandwidths.

    Returns:
        Tuple (values, empty_mask): values is the (n, p) estimate and
        empty_mask marks units with no usable neighborhood.
    """
    X = _as_matrix(covariates, "covariates")
    u = _as_matrix(index_values, "index_values")
    if X.shape[0] != u.shape[0]:
        raise LengthMismatch(
            f"{X.shape[0]} covariate rows but {u.shape[0]} index rows"
        )
    h = _bandwidth_vector(bandwidth, u.shape[1])
    z = u / h
    K = _kernel_matrix(z, z)
    np.fill_diagonal(K, 0.0)
    mass = K.sum(axis=1)
    empty = mass < EMPTY_MASS
    denom = np.where(empty, 1.0, mass)
    values = (K @ X) / denom[:, None]
    if empty.any():
        values[empty] = X.mean(axis=0)
    return values, empty


@dataclass(frozen=True)
class LocalFit:
    """Local kernel-logistic estimates of the link and its gradient.

    Attributes:
        b0: length-m local level, the link estimate at each evaluation point.
        b1: (m, q) local slope, the link-gradient estimate.
        bandwidth: length-q kernel bandwidth used.
        converged: length-m flag; False entries carry a reason code.
        reasons: per-point reason strings, empty where converged.
    """

    b0: np.ndarray
    b1: np.ndarray
    bandwidth: np.ndarray
    converged: np.ndarray
    reasons: tuple

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(~self.converged))

    @property
    def flag_counts(self) -> dict:
        counts: dict = {}
        for reason in self.reasons:
            if reason:
                counts[reason] = counts.get(reason, 0) + 1
        return counts


def _weighted_loglik(W, t, eta):
    """Row-wise kernel-weighted Bernoulli log-likelihood."""
    return (W * (t[None, :] * eta - np.logaddexp(0.0, eta))).sum(axis=1)


def local_logistic(
    index_values,
    treatment,
    eval_points,
    bandwidth,
    start=None,
    max_iter: int = _NEWTON_MAX_ITER,
    tol: float = _NEWTON_TOL,
) -> LocalFit:
    """Kernel-weighted local-linear logistic fit of the link at given points.

    At each evaluation point the level b0 and slope b1 solve the local
    score equations for a logistic model in the centered index, weighted by
    a Gaussian product kernel.  Newton steps with step-halving keep the
    weighted log-likelihood nondecreasing.

    Degenerate points are flagged instead of failing: a point whose kernel
    neighborhood holds only one treatment value gets b0 at the clamped
    logit of the local mean and b1 = 0 (reason ``local_separation``); a
    point with kernel mass below ``EMPTY_MASS`` gets the clamped logit of
    the overall treated share (reason ``empty_neighborhood``); a point
    whose Newton loop hits ``max_iter`` keeps its last iterate (reason
    ``newton_max_iter``).

    Args:
        index_values: (n, q) sample index values.
        treatment: length-n 0/1 vector (one arm may be empty here).
        eval_points: (m, q) points at which to estimate the link.
        bandwidth: positive scalar or length-q kernel bandwidth.
        start: optional (b0, b1) warm start with shapes (m,) and (m, q).
        max_iter: Newton iteration cap per point.
        tol: gradient max-norm tolerance, scaled by the local kernel mass.

    Returns:
        A ``LocalFit`` with finite b0, b1 everywhere and per-point flags.
    """
    u = _as_matrix(index_values, "index_values")
    v = _as_matrix(eval_points, "eval_points")
    if u.shape[1] != v.shape[1]:
        raise ShapeMismatch(
            f"eval points have {v.shape[1]} columns, index has {u.shape[1]}"
        )
    t = _check_binary(treatment)
    if t.shape[0] != u.shape[0]:
        raise LengthMismatch(f"{t.shape[0]} treatments but {u.shape[0]} index rows")
    q = u.shape[1]
    m = v.shape[0]
    h = _bandwidth_vector(bandwidth, q)

    W = _kernel_matrix(v / h, u / h)
    mass = W.sum(axis=1)
    tbar = t.mean() if t.size else 0.5
    wmean = np.where(mass > 0.0, (W @ t) / np.where(mass > 0.0, mass, 1.0), tbar)

    empty = mass < EMPTY_MASS
    separated = (~empty) & ((wmean <= PS_FLOOR) | (wmean >= PS_CEIL))
    active = ~(empty | separated)

    b0 = logit(np.clip(np.where(empty, tbar, wmean), PS_FLOOR, PS_CEIL))
    b1 = np.zeros((m, q))
    converged = np.zeros(m, dtype=bool)
    reasons = np.full(m, "", dtype=object)
    reasons[empty] = REASON_EMPTY
    reasons[separated] = REASON_SEPARATION

    if active.any():
        idx = np.flatnonzero(active)
        Wa = W[idx]
        mass_a = mass[idx]
        d = u[None, :, :] - v[idx, None, :]
        b0a = b0[idx].copy()
        b1a = np.zeros((idx.size, q))
        if start is not None:
            s0 = np.asarray(start[0], dtype=float)
            s1 = np.asarray(start[1], dtype=float)
            if s0.shape == (m,) and s1.shape == (m, q):
                ok = np.isfinite(s0[idx]) & np.all(np.isfinite(s1[idx]), axis=1)
                b0a = np.where(ok, s0[idx], b0a)
                b1a = np.where(ok[:, None], s1[idx], b1a)
            else:
                raise ShapeMismatch("warm start shapes do not match eval points")

        scale = tol * np.maximum(1.0, mass_a)
        done = np.zeros(idx.size, dtype=bool)
        for _ in range(max_iter):
            eta = b0a[:, None] + np.einsum("mnk,mk->mn", d, b1a)
            pi = expit(eta)
            resid = Wa * (t[None, :] - pi)
            g0 = resid.sum(axis=1)
            g1 = np.einsum("mn,mnk->mk", resid, d)
            gmax = np.maximum(np.abs(g0), np.abs(g1).max(axis=1))
            done = gmax <= scale
            if done.all():
                break

            s = Wa * pi * (1.0 - pi)
            H = np.empty((idx.size, q + 1, q + 1))
            H[:, 0, 0] = s.sum(axis=1)
            H[:, 0, 1:] = np.einsum("mn,mnk->mk", s, d)
            H[:, 1:, 0] = H[:, 0, 1:]
            H[:, 1:, 1:] = np.einsum("mn,mnj,mnk->mjk", s, d, d)
            H[:, np.arange(q + 1), np.arange(q + 1)] += _HESSIAN_RIDGE
            g = np.concatenate([g0[:, None], g1], axis=1)
            step = np.linalg.solve(H, g[:, :, None])[:, :, 0]
            # cap the linear-predictor change across one bandwidth so a
            # near-flat Hessian cannot throw the iterate out of range
            moved = np.max(np.abs(step) * np.concatenate(([1.0], h))[None, :], axis=1)
            shrink = np.ones_like(moved)
            np.divide(_STEP_CAP, moved, out=shrink, where=moved > _STEP_CAP)
            step *= shrink[:, None]

            ll_old = _weighted_loglik(Wa, t, eta)
            alpha = np.ones(idx.size)
            c0 = b0a + alpha * step[:, 0]
            c1 = b1a + alpha[:, None] * step[:, 1:]
            eta_new = c0[:, None] + np.einsum("mnk,mk->mn", d, c1)
            ll_new = _weighted_loglik(Wa, t, eta_new)
            for _halving in range(_MAX_HALVINGS):
                worse = ll_new < ll_old - 1e-12
                if not worse.any():
                    break
                alpha[worse] *= 0.5
                c0[worse] = b0a[worse] + alpha[worse] * step[worse, 0]
                c1[worse] = b1a[worse] + alpha[worse, None] * step[worse, 1:]
                eta_w = c0[worse][:, None] + np.einsum(
                    "mnk,mk->mn", d[worse], c1[worse]
                )
                ll_new[worse] = _weighted_loglik(Wa[worse], t, eta_w)
            still = ll_new < ll_old - 1e-12
            c0[still] = b0a[still]
            c1[still] = b1a[still]
            b0a, b1a = c0, c1

        b0[idx] = b0a
        b1[idx] = b1a
        converged[idx] = done
        reasons[idx[~done]] = REASON_MAX_ITER

    return LocalFit(
        b0=b0,
        b1=b1,
        bandwidth=h,
        converged=converged,
        reasons=tuple(reasons.tolist()),
    )


def initial_equation(data: Dataset, basis: IndexBasis, bandwidth=None) -> np.ndarray:
    """Averaged initial estimating-equation components at a basis.

    Under the working link ``eta(u) = sum(u)``, the free components are the
    sample averages of (X_j - E[X_j | index]) times the working residual,
    one per free row, repeated across the q index columns.

    Args:
        data: validated dataset supplying covariates and treatment.
        basis: candidate index basis.
        bandwidth: optional kernel bandwidth override.

    Returns:
        Length (p - q) * q vector in the same layout as ``basis.vecl``.
    """
    X = data.covariates
    u = basis.index(X)
    h = rule_of_thumb_bandwidth(u) if bandwidth is None else _bandwidth_vector(
        bandwidth, basis.q
    )
    cond, _ = nw_conditional_mean(X, u, h)
    resid = data.treatment - expit(u.sum(axis=1))
    comp = ((X - cond) * resid[:, None]).mean(axis=0)[basis.q:]
    return np.tile(comp, basis.q)


def fit_initial_beta(
    data: Dataset,
    q: int,
    start: IndexBasis = None,
    rng: RngStream = None,
    bandwidth=None,
) -> IndexBasis:
    """Solve the initial estimating equation for the index basis.

    Runs a damped least-squares root search from ``start`` (or a random
    gauge basis drawn from ``rng``), retrying from up to four further
    random starts when the residual stays above ``INITIAL_TOL``.

    Args:
        data: validated dataset.
        q: index dimension, 1 <= q < p.
        start: optional starting basis in the identity gauge.
        rng: stream used for random starts; required when start is None.
        bandwidth: optional kernel bandwidth override.

    Returns:
        The fitted basis with equation residual max-norm <= INITIAL_TOL.

    Raises:
        NoConvergence: no attempt reached the residual tolerance; the
            message reports the best residual seen.
        ValidationError: q out of range, or no start and no rng.
    """
    p = data.n_covariates
    if q < 1 or p <= q:
        raise ValidationError(f"index needs p > q >= 1, got p={p}, q={q}")
    gen = rng.generator() if rng is not None else None
    if start is None:
        if gen is None:
            raise ValidationError("fit_initial_beta needs a start basis or an rng")
        start = random_basis(p, q, gen)
    elif start.p != p or start.q != q:
        raise ValidationError(
            f"start basis is {start.p} x {start.q}, expected {p} x {q}"
        )
    n_free = (p - q) * q

    def residual(vecl):
        return initial_equation(data, IndexBasis.from_vecl(vecl, p, q), bandwidth)

    best = np.inf
    n_restarts = _MAX_RANDOM_RESTARTS if gen is not None else 0
    for attempt in range(1 + n_restarts):
        x0 = start.vecl if attempt == 0 else random_basis(p, q, gen).vecl
        sol = scipy.optimize.least_squares(
            residual,
            x0,
            method="lm",
            xtol=1e-12,
            ftol=1e-12,
            gtol=1e-12,
            max_nfev=200 * (n_free + 1),
        )
        worst = float(np.max(np.abs(sol.fun)))
        best = min(best, worst)
        if worst <= INITIAL_TOL:
            return IndexBasis.from_vecl(sol.x, p, q)
    raise NoConvergence(
        f"initial estimating equation stalled at max residual {best:.3e}"
    )


def _score_parts(data: Dataset, basis: IndexBasis, bandwidth, warm):
    """Evaluate the efficient score and return its ingredients."""
    X = data.covariates
    u = basis.index(X)
    h = rule_of_thumb_bandwidth(u) if bandwidth is None else _bandwidth_vector(
        bandwidth, basis.q
    )
    cond, empty = nw_conditional_mean(X, u, h)
    local = local_logistic(u, data.treatment, u, h, start=warm)
    resid = data.treatment - expit(local.b0)
    centered = (X - cond)[:, basis.q:]
    score = centered.T @ (resid[:, None] * local.b1) / data.n_units
    return score.ravel(order="F"), local, empty, h


def efficient_score(data: Dataset, basis: IndexBasis, bandwidth=None) -> np.ndarray:
    """Averaged efficient-score components at a basis.

    Each free component averages (X_j - E[X_j | index]) times the residual
    against the local link fit times the local link gradient.

    Args:
        data: validated dataset.
        basis: candidate index basis.
        bandwidth: optional kernel bandwidth override.

    Returns:
        Length (p - q) * q vector in the same layout as ``basis.vecl``.
    """
    score, _, _, _ = _score_parts(data, basis, bandwidth, None)
    return score


def fit_sdr(
    data: Dataset,
    q: int,
    start: IndexBasis = None,
    rng: RngStream = None,
    bandwidth=None,
):
    """Two-step semiparametric fit of the index basis and propensities.

    First fits the initial basis, then solves the efficient score by a
    quasi-Newton root search with finite-difference Jacobian, warm-starting
    each local-link solve at the previous evaluation.  Propensities are
    ``expit`` of the local link at the sample's own index values.

    Args:
        data: validated dataset.
        q: index dimension, 1 <= q < p.
        start: optional starting basis for the initial step.
        rng: stream for random starts; required when start is None.
        bandwidth: optional kernel bandwidth override for both steps.

    Returns:
        Tuple (basis, fit): the solved ``IndexBasis`` and a
        ``PropensityFit`` whose diagnostics count every flagged unit
        (``n_flagged``, ``flag_counts``, ``nw_empty``) alongside the
        residuals of both solves.

    Raises:
        NoConvergence: either solve stalled above its tolerance.
    """
    initial = fit_initial_beta(data, q, start=start, rng=rng, bandwidth=bandwidth)
    p = data.n_covariates
    n_free = (p - q) * q
    state = {"warm": None}

    def score(vecl):
        basis = IndexBasis.from_vecl(vecl, p, q)
        vec, local, _, _ = _score_parts(data, basis, bandwidth, state["warm"])
        state["warm"] = (local.b0, local.b1)
        return vec

    sol = scipy.optimize.root(
        score,
        initial.vecl,
        method="hybr",
        options={"maxfev": 200 * (n_free + 1), "xtol": 1e-10},
    )
    basis = IndexBasis.from_vecl(sol.x, p, q)
    vec, local, empty, h = _score_parts(data, basis, bandwidth, state["warm"])
    residual = float(np.max(np.abs(vec)))
    if residual > SCORE_TOL:
        raise NoConvergence(
            f"efficient score stalled at max residual {residual:.3e}"
        )

    diagnostics = {
        "initial_residual": float(
            np.max(np.abs(initial_equation(data, initial, bandwidth)))
        ),
        "score_residual": residual,
        "n_flagged": local.n_flagged,
        "flag_counts": local.flag_counts,
        "nw_empty": int(empty.sum()),
        "bandwidth": tuple(float(b) for b in h),
        "nfev": int(sol.nfev),
    }
    if local.n_flagged > 0:
        diagnostics["reason"] = "flagged_local_fits"
    fit = PropensityFit.from_raw(
        expit(local.b0),
        method="sdr",
        converged=local.n_flagged == 0,
        diagnostics=diagnostics,
    )
    return basis, fit


def predict_sdr(data: Dataset, basis: IndexBasis, covariates, bandwidth=None) -> PropensityFit:
    """Propensities for new covariate rows from a fitted basis.

    Re-estimates the link at the new points by local kernel logistic
    against the training sample.

    Args:
        data: training dataset the basis was fitted on.
        basis: fitted index basis.
        covariates: (m, p) new covariate rows.
        bandwidth: optional kernel bandwidth override; defaults to the
            rule of thumb on the training index.

    Returns:
        A ``PropensityFit`` over the new rows with per-point flag counts.
    """
    u_train = basis.index(data.covariates)
    h = rule_of_thumb_bandwidth(u_train) if bandwidth is None else _bandwidth_vector(
        bandwidth, basis.q
    )
    u_new = basis.index(covariates)
    local = local_logistic(u_train, data.treatment, u_new, h)
    diagnostics = {
        "n_flagged": local.n_flagged,
        "flag_counts": local.flag_counts,
        "bandwidth": tuple(float(b) for b in h),
    }
    if local.n_flagged > 0:
        diagnostics["reason"] = "flagged_local_fits"
    return PropensityFit.from_raw(
        expit(local.b0),
        method="sdr",
        converged=local.n_flagged == 0,
        diagnostics=diagnostics,
    )
