"""Exception types shared across the package.

Structural problems (bad input shapes, rank-deficient designs, malformed
configs) raise; iterative failures (non-convergence, separation) are instead
reported through ``converged`` flags and reason codes on result objects so a
simulation harness can tally them without try/except plumbing.
"""


class PsrobustError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PsrobustError, ValueError):
    """Input data violates a documented precondition."""


class NonBinaryTreatment(ValidationError):
    """Treatment vector contains a value other than 0 or 1."""


class EmptyArm(ValidationError):
    """One of the treatment arms has no units."""


class NonFiniteValue(ValidationError):
    """A NaN or infinity appeared where a finite number is required."""


class LengthMismatch(ValidationError):
    """Arrays that must share a length do not."""


class MissingOutcome(ValidationError):
    """An outcome-based quantity was requested from data with no outcome."""


class CsvFormatError(ValidationError):
    """A data file does not follow the documented CSV layout."""


class ShapeMismatch(ValidationError):
    """An array has the wrong number of columns for the fitted model."""


class TermSyntaxError(PsrobustError, ValueError):
    """A design term string does not follow the term grammar."""


class RankDeficientDesign(PsrobustError):
    """Design matrix does not have full column rank."""


class IdentificationFailure(PsrobustError):
    """Two candidate models produce identical log-odds on the sample."""


class CollinearPredictors(PsrobustError):
    """Candidate log-odds columns are linearly dependent."""


class InvalidSimplex(PsrobustError, ValueError):
    """Weight vector is not on the probability simplex."""


class NotADistribution(PsrobustError, ValueError):
    """Probability masses are negative or do not sum to one."""


class NoConvergence(PsrobustError):
    """An optimizer produced no usable solution from any start."""


class SingularWeightMatrix(PsrobustError):
    """A GMM weight matrix could not be inverted."""


class ConfigError(PsrobustError, ValueError):
    """Study configuration file is malformed or inconsistent."""
