"""Two-step integration of candidate propensity models.

Stage 1 fits each candidate binary GLM by maximum likelihood.  Stage 2 treats
the fitted log-odds surfaces ``theta_k(x)`` as predictors and fits a second
logistic regression of the treatment on them, with no intercept and with the
mixing coefficients gamma left unconstrained.  The integrated propensity is
``expit(sum_k gamma_k theta_k(x))``, so when one candidate is correct the
second stage can load on it alone (gamma -> unit vector on that coordinate),
and under misspecification the blend tracks the best log-odds combination.

A likelihood-weighting alternative (``fit_ma``) mixes candidate propensities
with information-criterion weights ``w_k`` proportional to ``exp(-IC_k/2)``,
computed after subtracting the smallest IC so the weights stay finite for
any sample size.

``kl_gap_discrete`` evaluates, by exact summation on a finite covariate grid,
both sides of the inequality that makes simplex blends safe: the divergence
of a gamma-blend never exceeds the gamma-average of the candidate
divergences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import clamp_propensity
from .errors import (
    CollinearPredictors,
    IdentificationFailure,
    InvalidSimplex,
    NotADistribution,
    ValidationError,
)
from .glm import (
    BERNOULLI,
    GlmFit,
    ModelSpec,
    fit_glm,
    fit_glm_design,
    information_criterion,
    link_mean,
    log_odds_surface,
)

# two candidates are indistinguishable when their fitted log-odds agree to
# this tolerance everywhere on the sample
IDENTIFICATION_TOL = 1e-8


@dataclass(frozen=True)
class CandidateSet:
    """Stage-1 candidate models with their fits."""

    specs: tuple
    fits: tuple

    @property
    def n_candidates(self) -> int:
        return len(self.specs)

    @property
    def all_converged(self) -> bool:
        return all(f.converged for f in self.fits)

    def log_odds_matrix(self, covariates) -> np.ndarray:
        """(n, K) matrix of candidate log-odds surfaces theta_k(x_i)."""
        cols = [
            log_odds_surface(f, s, covariates)
            for s, f in zip(self.specs, self.fits)
        ]
        return np.column_stack(cols)


@dataclass(frozen=True)
class IntegratedFit:
    """Stage-2 mixing coefficients."""

    gamma: np.ndarray
    converged: bool
    n_iter: int
    log_likelihood: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MaFit:
    """Information-criterion weights for likelihood-based model averaging."""

    weights: np.ndarray
    criterion: str
    ic_values: np.ndarray


def fit_candidates(covariates, treatment, specs, tol: float = 1e-8, max_iter: int = 100) -> CandidateSet:
    """Fit every candidate model by maximum likelihood.

    Args:
        covariates: (n, p) matrix.
        treatment: length-n 0/1 vector.
        specs: iterable of ``ModelSpec`` (at least one).

    Returns:
        ``CandidateSet`` in the given order; per-candidate convergence is on
        each fit, and ``all_converged`` summarizes it.
    """
    specs = tuple(specs)
    if not specs:
        raise ValidationError("need at least one candidate model")
    fits = tuple(
        fit_glm(covariates, treatment, s, BERNOULLI, tol=tol, max_iter=max_iter)
        for s in specs
    )
    return CandidateSet(specs=specs, fits=fits)


def check_identification(theta: np.ndarray) -> None:
    """Raise unless every pair of candidate log-odds columns separates.

    Args:
        theta: (n, K) candidate log-odds matrix.

    Raises:
        IdentificationFailure: some pair of columns agrees everywhere on the
            sample to within ``IDENTIFICATION_TOL``.
    """
    K = theta.shape[1]
    for a in range(K):
        for b in range(a + 1, K):
            if np.max(np.abs(theta[:, a] - theta[:, b])) <= IDENTIFICATION_TOL:
                raise IdentificationFailure(
                    f"candidates {a + 1} and {b + 1} produce identical log-odds on this sample"
                )


def fit_integrated(
    covariates,
    treatment,
    cand: CandidateSet,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> IntegratedFit:
    """Stage 2: logistic regression of treatment on candidate log-odds.

    The design is the (n, K) log-odds matrix with no intercept column, and
    gamma is unconstrained.

    Returns:
        ``IntegratedFit``; non-convergence (including stage-1 candidates that
        did not converge) is reported through the flag and reason code.

    Raises:
        IdentificationFailure: two candidates coincide on the sample.
        CollinearPredictors: the log-odds columns are linearly dependent.
    """
    theta = cand.log_odds_matrix(covariates)
    check_identification(theta)
    if np.linalg.matrix_rank(theta) < theta.shape[1]:
        raise CollinearPredictors("candidate log-odds columns are linearly dependent")
    if not cand.all_converged:
        bad = [i + 1 for i, f in enumerate(cand.fits) if not f.converged]
        return IntegratedFit(
            gamma=np.full(cand.n_candidates, np.nan),
            converged=False,
            n_iter=0,
            log_likelihood=float("nan"),
            diagnostics={"reason": f"stage1_not_converged[{bad}]"},
        )
    t = np.asarray(treatment, dtype=float)
    res = fit_glm_design(
        theta, t, link="logit", tol=tol, max_iter=max_iter,
        design_label="stage-2 log-odds design",
    )
    diag = dict(res.diagnostics)
    if res.converged:
        # concavity certificate: the stage-2 Hessian of the total likelihood
        # is -Theta' W Theta; its largest eigenvalue must be negative
        p = link_mean("logit", theta @ res.beta)
        H = -(theta * (p * (1.0 - p))[:, None]).T @ theta
        diag["hessian_max_eig"] = float(np.max(np.linalg.eigvalsh(H)))
    return IntegratedFit(
        gamma=res.beta,
        converged=res.converged,
        n_iter=res.n_iter,
        log_likelihood=res.log_likelihood,
        diagnostics=diag,
    )


def predict_integrated(fit: IntegratedFit, cand: CandidateSet, covariates) -> np.ndarray:
    """Integrated propensity ``expit(theta(x) @ gamma)``, clamped."""
    theta = cand.log_odds_matrix(covariates)
    return clamp_propensity(link_mean("logit", theta @ fit.gamma))


def fit_ma(cand: CandidateSet, criterion: str = "bic") -> MaFit:
    """Information-criterion weights over the candidate set.

    Weights are ``exp(-(IC_k - min_j IC_j) / 2)`` normalized to sum to one;
    subtracting the minimum keeps the exponentials representable no matter
    how large the ICs grow with n.
    """
    ic = np.array([information_criterion(f, criterion) for f in cand.fits])
    shifted = ic - np.min(ic)
    w = np.exp(-0.5 * shifted)
    w /= w.sum()
    return MaFit(weights=w, criterion=criterion, ic_values=ic)


def predict_ma(fit: MaFit, cand: CandidateSet, covariates) -> np.ndarray:
    """Weight-mixed candidate propensities, clamped."""
    probs = np.column_stack(
        [
            link_mean(s.link, s.design(covariates) @ f.beta)
            for s, f in zip(cand.specs, cand.fits)
        ]
    )
    return clamp_propensity(probs @ fit.weights)


# ---------------------------------------------------------------------------
# Exact divergence comparison on a finite grid
# ---------------------------------------------------------------------------

def _log_sigma(theta):
    # log expit(theta) and log(1 - expit(theta)), both stable
    return -np.logaddexp(0.0, -theta), -np.logaddexp(0.0, theta)


def _entropy_terms(q):
    # q*log q + (1-q)*log(1-q) with the 0*log 0 = 0 convention
    out = np.zeros_like(q)
    pos = q > 0.0
    out[pos] += q[pos] * np.log(q[pos])
    lt1 = q < 1.0
    out[lt1] += (1.0 - q[lt1]) * np.log(1.0 - q[lt1])
    return out


def kl_gap_discrete(x_probs, t1_probs, thetas, gamma):
    """Both sides of the blend-divergence inequality, by exact summation.

    The covariate takes finitely many values ``j`` with masses ``x_probs``;
    the true conditional treatment probability at value ``j`` is
    ``t1_probs[j]``; candidate ``k`` models the log-odds at value ``j`` as
    ``thetas[j, k]``.  For a simplex weight vector gamma this returns

    * lhs: divergence of the model with log-odds ``thetas @ gamma``,
    * rhs: gamma-weighted average of the candidate divergences,

    where each divergence is the expected log-likelihood gap to the truth,
    summed over the grid and both treatment values.  lhs <= rhs always.

    Args:
        x_probs: grid masses, nonnegative, summing to one.
        t1_probs: true conditional probabilities on [0, 1].
        thetas: (G, K) candidate log-odds values, finite.
        gamma: length-K simplex weights.

    Returns:
        Tuple ``(lhs, rhs)``.

    Raises:
        NotADistribution: masses or conditionals are not a distribution.
        InvalidSimplex: gamma is not on the probability simplex.
    """
    px = np.asarray(x_probs, dtype=float)
    q = np.asarray(t1_probs, dtype=float)
    th = np.asarray(thetas, dtype=float)
    g = np.asarray(gamma, dtype=float)
    if px.ndim != 1 or np.any(px < 0.0) or abs(px.sum() - 1.0) > 1e-9:
        raise NotADistribution("grid masses must be nonnegative and sum to one")
    if q.shape != px.shape or np.any(q < 0.0) or np.any(q > 1.0):
        raise NotADistribution("conditional probabilities must lie in [0, 1]")
    if th.ndim != 2 or th.shape[0] != px.shape[0] or not np.all(np.isfinite(th)):
        raise ValidationError("thetas must be a finite (grid, candidates) matrix")
    if g.shape != (th.shape[1],) or np.any(g < -1e-12) or abs(g.sum() - 1.0) > 1e-9:
        raise InvalidSimplex("gamma must be nonnegative and sum to one")

    ent = px @ _entropy_terms(q)

    def divergence(theta_col):
        log_p1, log_p0 = _log_sigma(theta_col)
        return ent - px @ (q * log_p1 + (1.0 - q) * log_p0)

    lhs = divergence(th @ g)
    rhs = float(sum(g[k] * divergence(th[:, k]) for k in range(th.shape[1])))
    return float(lhs), rhs
