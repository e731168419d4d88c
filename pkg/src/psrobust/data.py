"""Dataset container, validation, propensity-score records, and CSV layout.

Every estimation routine in the package consumes data through ``Dataset`` or
plain arrays checked by the same validators, and every propensity method
reports through ``PropensityFit``, whose scores are clamped away from 0 and 1
once, here, so downstream weighting never divides by zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CsvFormatError,
    EmptyArm,
    LengthMismatch,
    MissingOutcome,
    NonBinaryTreatment,
    NonFiniteValue,
    ValidationError,
)

# Hard clamp applied to every propensity score handed downstream.
PS_FLOOR = 1e-6
PS_CEIL = 1.0 - 1e-6

# Numbers are written with 17 significant digits so a CSV round trip
# reproduces every double bit-for-bit.
_FLOAT_FMT = "%.17g"


def clamp_propensity(scores) -> np.ndarray:
    """Clamp scores into [1e-6, 1 - 1e-6]."""
    return np.clip(np.asarray(scores, dtype=float), PS_FLOOR, PS_CEIL)


@dataclass(frozen=True)
class Dataset:
    """Validated study data.

    Attributes:
        treatment: length-n int vector of 0/1 assignments, both arms present.
        covariates: (n, p) float matrix, all entries finite.
        outcome: optional length-n float vector.
        column_names: covariate names, one per column.
    """

    treatment: np.ndarray
    covariates: np.ndarray
    outcome: Optional[np.ndarray] = None
    column_names: tuple = ()

    @property
    def n_units(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def has_outcome(self) -> bool:
        return self.outcome is not None

    def require_outcome(self, what: str) -> np.ndarray:
        if self.outcome is None:
            raise MissingOutcome(f"{what} needs an outcome column but the data has none")
        return self.outcome


def check_treatment(treatment) -> np.ndarray:
    """Validate a treatment vector alone; returns it as an int array."""
    t = np.asarray(treatment)
    if t.ndim != 1:
        raise ValidationError("treatment must be a 1-d vector")
    tf = t.astype(float, copy=False)
    if not np.all(np.isfinite(tf)):
        row = int(np.flatnonzero(~np.isfinite(tf))[0])
        raise NonFiniteValue(f"treatment has a non-finite value at row {row}")
    bad = ~np.isin(tf, (0.0, 1.0))
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise NonBinaryTreatment(
            f"treatment must be 0/1; found {t[row]!r} at row {row}"
        )
    ti = tf.astype(np.int64)
    n1 = int(ti.sum())
    if n1 == 0:
        raise EmptyArm("no treated units in the data")
    if n1 == ti.shape[0]:
        raise EmptyArm("no control units in the data")
    return ti


def validate_dataset(treatment, covariates, outcome=None, column_names=None) -> Dataset:
    """Validate raw arrays and assemble a ``Dataset``.

    Args:
        treatment: length-n 0/1 vector with both arms represented.
        covariates: (n, p) numeric matrix (a 1-d array is taken as one column).
        outcome: optional length-n numeric vector.
        column_names: optional covariate names; defaults to x1..xp.

    Returns:
        The validated dataset (arrays converted to float64/int64).

    Raises:
        NonBinaryTreatment, EmptyArm, NonFiniteValue, LengthMismatch,
        ValidationError: as described by each check.
    """
    # row-major layout, so downstream linear algebra is bit-reproducible
    # regardless of how the caller's array was laid out in memory
    X = np.ascontiguousarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValidationError(f"covariates must be 2-d, got shape {X.shape}")
    n, p = X.shape
    if p < 1:
        raise ValidationError("covariates must have at least one column")

    if column_names is None:
        names = tuple(f"x{j + 1}" for j in range(p))
    else:
        names = tuple(str(c) for c in column_names)
        if len(names) != p:
            raise LengthMismatch(
                f"{len(names)} column names for {p} covariate columns"
            )
        if len(set(names)) != p:
            raise ValidationError("covariate names must be unique")

    t = np.asarray(treatment)
    if t.ndim != 1 or t.shape[0] != n:
        raise LengthMismatch(
            f"treatment has length {t.shape[0] if t.ndim == 1 else t.shape}, covariates have {n} rows"
        )
    ti = check_treatment(t)

    if not np.all(np.isfinite(X)):
        r, c = np.argwhere(~np.isfinite(X))[0]
        raise NonFiniteValue(
            f"covariate {names[c]!r} has a non-finite value at row {int(r)}"
        )

    y = None
    if outcome is not None:
        y = np.ascontiguousarray(outcome, dtype=float)
        if y.ndim != 1 or y.shape[0] != n:
            raise LengthMismatch(
                f"outcome has length {y.shape[0] if y.ndim == 1 else y.shape}, expected {n}"
            )
        if not np.all(np.isfinite(y)):
            row = int(np.flatnonzero(~np.isfinite(y))[0])
            raise NonFiniteValue(f"outcome has a non-finite value at row {row}")

    return Dataset(treatment=ti, covariates=X, outcome=y, column_names=names)


@dataclass(frozen=True)
class PropensityFit:
    """Scores and bookkeeping from one fitted propensity method.

    Attributes:
        scores: length-n clamped scores, every entry in (0, 1).
        method: short tag naming the method ("logistic", "cbps", ...).
        converged: whether the fitting routine met its own stopping rule.
        diagnostics: scalar diagnostics (iterations, objective, ...) plus a
            string ``reason`` code whenever ``converged`` is False.
        raw_scores: the scores exactly as the method produced them, before
            clamping.
    """

    scores: np.ndarray
    method: str
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    raw_scores: np.ndarray = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1:
            raise ValidationError("propensity scores must be a 1-d vector")
        if not np.all(np.isfinite(s)) or np.any(s <= 0.0) or np.any(s >= 1.0):
            raise ValidationError("propensity scores must lie strictly inside (0, 1)")
        if not self.converged and "reason" not in self.diagnostics:
            raise ValidationError("a non-converged fit must carry a diagnostics reason")

    @classmethod
    def from_raw(cls, raw_scores, method, converged=True, diagnostics=None) -> "PropensityFit":
        """Clamp raw scores and build the record.

        Raises:
            NonFiniteValue: a method produced NaN or infinity; methods must
                flag those cases explicitly rather than pass them through.
        """
        raw = np.asarray(raw_scores, dtype=float)
        if not np.all(np.isfinite(raw)):
            raise NonFiniteValue(f"method {method!r} produced non-finite scores")
        diag = dict(diagnostics or {})
        clamped = clamp_propensity(raw)
        diag.setdefault("n_clamped", float(np.count_nonzero(clamped != raw)))
        return cls(
            scores=clamped,
            method=str(method),
            converged=bool(converged),
            diagnostics=diag,
            raw_scores=raw,
        )


def as_scores(ps, n: int) -> np.ndarray:
    """Accept a ``PropensityFit`` or bare array and return validated scores.

    Bare arrays must already lie in (0, 1); they are clamped to the standard
    floor and ceiling like any other scores.
    """
    s = ps.scores if isinstance(ps, PropensityFit) else np.asarray(ps, dtype=float)
    if s.ndim != 1 or s.shape[0] != n:
        raise LengthMismatch(f"scores have shape {s.shape}, expected ({n},)")
    if not np.all(np.isfinite(s)) or np.any(s <= 0.0) or np.any(s >= 1.0):
        raise ValidationError("propensity scores must lie strictly inside (0, 1)")
    return clamp_propensity(s)


# ---------------------------------------------------------------------------
# CSV layout: header row; column "T" is the treatment, optional column "Y"
# is the outcome, every other column is a covariate in file order.
# ---------------------------------------------------------------------------

def read_dataset_csv(path) -> Dataset:
    """Read a dataset from the documented CSV layout.

    Args:
        path: file with a header row containing ``T``, optionally ``Y``, and
            covariate columns; plain decimal numbers.

    Returns:
        Validated ``Dataset`` with covariate column order preserved.

    Raises:
        CsvFormatError: structural problems (missing T, ragged rows,
            non-numeric cells).
        ValidationError subclasses: the parsed arrays fail validation.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "T" not in header:
            raise CsvFormatError(f"{path}: no 'T' column in header {header!r}")
        if header.count("T") > 1 or header.count("Y") > 1:
            raise CsvFormatError(f"{path}: duplicate T or Y column")
        t_col = header.index("T")
        y_col = header.index("Y") if "Y" in header else None
        cov_cols = [j for j in range(len(header)) if j != t_col and j != y_col]
        if not cov_cols:
            raise CsvFormatError(f"{path}: no covariate columns")

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_number(c))
                raise CsvFormatError(
                    f"{path}: line {lineno}: non-numeric value {bad!r}"
                ) from None

    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    M = np.asarray(rows, dtype=float)
    return validate_dataset(
        treatment=M[:, t_col],
        covariates=M[:, cov_cols],
        outcome=M[:, y_col] if y_col is not None else None,
        column_names=[header[j] for j in cov_cols],
    )


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_dataset_csv(path, data: Dataset) -> None:
    """Write a dataset in the same layout ``read_dataset_csv`` accepts.

    Floats carry 17 significant digits, so reading the file back reproduces
    the arrays bit-for-bit.
    """
    header = ["T"] + (["Y"] if data.has_outcome else []) + list(data.column_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_units):
            row = [str(int(data.treatment[i]))]
            if data.has_outcome:
                row.append(_FLOAT_FMT % data.outcome[i])
            row.extend(_FLOAT_FMT % v for v in data.covariates[i])
            writer.writerow(row)
