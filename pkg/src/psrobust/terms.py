"""Tiny design-term language shared by the model and balance configs.

A term is a ``*``-separated product of factors, each factor being

* ``1``        constant one (an intercept when it stands alone),
* ``x<j>``     covariate column ``j`` (1-based),
* ``x<j>^<p>`` that column raised to a small positive power,
* ``t``        the treatment indicator (outcome designs only).

Examples: ``x2``, ``x2^2``, ``x1*x3``, ``t*x2``.  Evaluation is exact
elementwise arithmetic, so a feature map is a deterministic, total function
of finite inputs.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import TermSyntaxError

_VAR_RE = re.compile(r"^x([1-9][0-9]*)(?:\^([1-9]))?$")

# parsed factor: ("const",), ("treat",) or ("var", column_index, power)
_CONST = ("const",)
_TREAT = ("treat",)


def _parse_factor(text: str, term: str):
    if text == "1":
        return _CONST
    if text == "t":
        return _TREAT
    m = _VAR_RE.match(text)
    if m is None:
        raise TermSyntaxError(
            f"bad factor {text!r} in term {term!r}; expected 1, t, x<j> or x<j>^<p>"
        )
    power = int(m.group(2)) if m.group(2) else 1
    return ("var", int(m.group(1)), power)


def parse_term(term: str):
    """Parse one term string into its factor list.

    Args:
        term: e.g. ``"x2^2"`` or ``"t*x2"``.

    Returns:
        List of parsed factors.

    Raises:
        TermSyntaxError: the string does not follow the grammar.
    """
    cleaned = term.strip().lower().replace(" ", "")
    if not cleaned:
        raise TermSyntaxError("empty term")
    return [_parse_factor(f, term) for f in cleaned.split("*")]


class FeatureMap:
    """Compiled list of design terms.

    Args:
        terms: term strings, one per design column, evaluated in order.

    Raises:
        TermSyntaxError: any term fails to parse, or the list is empty or
            contains duplicates.
    """

    def __init__(self, terms):
        names = tuple(t.strip().lower().replace(" ", "") for t in terms)
        if not names:
            raise TermSyntaxError("a feature map needs at least one term")
        if len(set(names)) != len(names):
            raise TermSyntaxError(f"duplicate terms in {list(names)!r}")
        self.names = names
        self._parsed = [parse_term(t) for t in names]

    @property
    def n_terms(self) -> int:
        return len(self.names)

    @property
    def uses_treatment(self) -> bool:
        return any(_TREAT in f for f in self._parsed)

    def max_column(self) -> int:
        """Highest covariate column index referenced (0 if none)."""
        cols = [f[1] for fs in self._parsed for f in fs if f[0] == "var"]
        return max(cols, default=0)

    def design(self, covariates, treatment=None) -> np.ndarray:
        """Evaluate the design matrix.

        Args:
            covariates: (n, p) array.
            treatment: length-n 0/1 vector; required iff a term uses ``t``.

        Returns:
            (n, k) float matrix with one column per term, in term order.
        """
        X = np.asarray(covariates, dtype=float)
        if X.ndim != 2:
            raise TermSyntaxError("covariates must be a 2-d array")
        n, p = X.shape
        if self.max_column() > p:
            raise TermSyntaxError(
                f"term references column x{self.max_column()} but data has {p} columns"
            )
        t = None
        if self.uses_treatment:
            if treatment is None:
                raise TermSyntaxError("a term uses t but no treatment vector was given")
            t = np.asarray(treatment, dtype=float)
            if t.shape != (n,):
                raise TermSyntaxError("treatment length does not match covariates")
        out = np.empty((n, self.n_terms), dtype=float)
        for k, factors in enumerate(self._parsed):
            col = np.ones(n, dtype=float)
            for f in factors:
                if f[0] == "const":
                    continue
                if f[0] == "treat":
                    col = col * t
                else:
                    col = col * X[:, f[1] - 1] ** f[2]
            out[:, k] = col
        return out

    def __repr__(self) -> str:  # pragma: no cover - debugging nicety
        return f"FeatureMap({list(self.names)!r})"


def design_matrix(covariates, terms, treatment=None) -> np.ndarray:
    """One-shot helper: ``FeatureMap(terms).design(covariates, treatment)``."""
    return FeatureMap(terms).design(covariates, treatment)
