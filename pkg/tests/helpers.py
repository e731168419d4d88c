"""Shared oracle helpers for the test suite."""

import numpy as np

from psrobust.glm import BERNOULLI, glm_log_likelihood, glm_score


def numeric_score(design, response, beta, link, family=BERNOULLI, h=1e-5):
    """Central-difference gradient of the mean log-likelihood."""
    beta = np.asarray(beta, dtype=float)
    n = np.asarray(design).shape[0]
    out = np.empty_like(beta)
    for j in range(beta.size):
        up, dn = beta.copy(), beta.copy()
        up[j] += h
        dn[j] -= h
        out[j] = (
            glm_log_likelihood(design, response, up, link, family)
            - glm_log_likelihood(design, response, dn, link, family)
        ) / (2.0 * h * n)
    return out


def score_gradient_gap(design, response, beta, link, family=BERNOULLI):
    """Relative gap between analytic and numeric score, max-norm."""
    analytic = glm_score(design, response, beta, link, family)
    numeric = numeric_score(design, response, beta, link, family)
    scale = max(1.0, float(np.max(np.abs(analytic))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def random_glm_instance(rng, link):
    """A random small dataset and coefficient point for gradient checks."""
    n = int(rng.integers(40, 200))
    p = int(rng.integers(1, 4))
    X = rng.normal(size=(n, p))
    D = np.column_stack([np.ones(n), X])
    beta_true = rng.uniform(-1.0, 1.0, size=p + 1)
    if link == "probit":
        from scipy.special import ndtr

        probs = ndtr(D @ beta_true)
    else:
        from scipy.special import expit

        probs = expit(D @ beta_true)
    t = (rng.random(n) < probs).astype(float)
    if t.sum() == 0:
        t[0] = 1.0
    if t.sum() == n:
        t[0] = 0.0
    beta_at = rng.uniform(-1.5, 1.5, size=p + 1)
    return D, t, beta_at


# ---------------------------------------------------------------------------
# Adversarial instances for the boundedness fuzz
# ---------------------------------------------------------------------------

def adversarial_binary_instance(rng, k):
    """One random binary-outcome dataset with deliberately extreme scores.

    The scores cycle through three regimes: the true propensity, a badly
    miscalibrated power of it, and an unrelated steep logistic surface, all
    clamped at the standard floor and ceiling.  Returns (dataset, scores,
    outcome-model terms).
    """
    from scipy.special import expit

    from psrobust.data import PS_CEIL, PS_FLOOR, validate_dataset

    n = int(rng.integers(30, 121))
    p = int(rng.integers(1, 4))
    X = rng.normal(size=(n, p))
    e_true = expit(X @ rng.uniform(-4.0, 4.0, size=p) + rng.uniform(-3.0, 3.0))
    t = (rng.random(n) < e_true).astype(int)
    t[rng.integers(0, n)] = 1
    t[rng.integers(0, n)] = 0
    y_prob = expit(X @ rng.uniform(-2.0, 2.0, size=p) + rng.uniform(-1.0, 1.0) * t)
    y = (rng.random(n) < y_prob).astype(float)
    mode = k % 3
    if mode == 0:
        e = e_true
    elif mode == 1:
        e = e_true**3
    else:
        e = expit(X @ rng.uniform(-6.0, 6.0, size=p))
    e = np.clip(e, PS_FLOOR, PS_CEIL)
    terms = ("1", "t", "x1") if k % 2 else ("1", "t", "x1", "t*x1")
    data = validate_dataset(treatment=t, covariates=X, outcome=y)
    return data, e, terms


def breakout_instance(n_treated=30, n_control=10, eps=1e-6):
    """The extreme configuration that breaks AIPW boundedness.

    Nearly all units are treated with scores at the floor, zero outcomes,
    and a given outcome model predicting 1 for them; the handful of
    controls have outcome 1 and moderate scores.  Returns (dataset, scores,
    given OutcomeModel).
    """
    from psrobust.data import validate_dataset
    from psrobust.estimands import OutcomeModel

    t = np.r_[np.ones(n_treated), np.zeros(n_control)].astype(int)
    x = np.r_[np.ones(n_treated), np.zeros(n_control)]
    y = np.r_[np.zeros(n_treated), np.ones(n_control)]
    e = np.r_[np.full(n_treated, eps), np.full(n_control, 0.5)]
    data = validate_dataset(treatment=t, covariates=x.reshape(-1, 1), outcome=y)
    given = OutcomeModel(terms=("t*x1",), xi=np.array([1.0]))
    return data, e, given
