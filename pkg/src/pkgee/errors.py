"""Exception types shared across the package.

Numerical failures are signals, not bugs: the solver catches DegenerateRoots /
NonPositiveConcentration (wrapped as EvalFailure) and backtracks, and the scan
layer records per-SNP failures without aborting the panel.
"""


class PkGeeError(Exception):
    """Base class for all package errors."""


class DegenerateRoots(PkGeeError):
    """Hybrid rate constants a and b are numerically unusable.

    Raised when the roots coincide to within relative 1e-10, or when a
    root (or a root product in the curve's denominators) left float range.
    The closed-form concentration divides by (a - b) and by root products;
    the caller must treat the evaluation as failed (the solver halves its
    step).
    """


class NonPositiveConcentration(PkGeeError):
    """Concentration evaluated to <= 0 (t = 0 or underflow); log undefined."""


class EvalFailure(PkGeeError):
    """Model evaluation failed while assembling the estimating equation."""

    def __init__(self, subject_id, cause):
        super().__init__(f"model evaluation failed for subject {subject_id!r}: {cause}")
        self.subject_id = subject_id
        self.cause = cause


class NotConverged(PkGeeError):
    """Solver exhausted its iteration or step-halving budget."""


class SingularInformation(PkGeeError):
    """Working information matrix could not be factorized (after column dropping)."""


class LeverageSingular(PkGeeError):
    """(I - H_i) is numerically singular; corrected variance unavailable."""

    def __init__(self, subject_id):
        super().__init__(f"(I - H) numerically singular for subject {subject_id!r}")
        self.subject_id = subject_id


class ZeroTrace(PkGeeError):
    """All residual scores orthogonal to the contrast; d.f. undefined."""


class NotEstimable(PkGeeError):
    """Contrast touches coefficients dropped for an empty genotype group."""


class SingularContrastCovariance(PkGeeError):
    """C'VC is singular; the F quadratic form cannot be evaluated."""


class UnsupportedGrid(PkGeeError):
    """Genotype counts requested outside the supported (maf, n) grid."""


class ParseError(PkGeeError):
    """A data file row failed validation."""

    def __init__(self, path, line, reason):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class SchemaError(PkGeeError):
    """A data file header is missing or has unexpected columns."""

    def __init__(self, path, column, reason):
        super().__init__(f"{path}: column {column!r}: {reason}")
        self.path = path
        self.column = column
        self.reason = reason


class JoinError(PkGeeError):
    """Subject identifiers of the two input tables do not reconcile."""

    def __init__(self, subject_ids, reason):
        ids = ", ".join(sorted(subject_ids))
        super().__init__(f"{reason}: {ids}")
        self.subject_ids = frozenset(subject_ids)
        self.reason = reason
