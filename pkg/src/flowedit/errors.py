"""Exception taxonomy shared by the library, the CLI, and the HTTP service.

Every error carries a machine-readable ``category`` so the CLI can emit a
stable error code and the service can map failures onto HTTP statuses.
"""


class FlowEditError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ShapeError(FlowEditError):
    """Operands have incompatible shapes."""

    category = "shape"


class NonFiniteError(FlowEditError):
    """A NaN or Inf appeared where only finite values are allowed."""

    category = "non_finite"


class GradientError(FlowEditError):
    """Backward called on a non-scalar, a consumed tape, or a grad-free graph."""

    category = "gradient"


class SolverError(FlowEditError):
    """Invalid solver configuration."""

    category = "solver"


class StepUnderflowError(SolverError):
    """Adaptive step size shrank below the divergence threshold."""

    category = "divergence"


class NumericalBlowupError(SolverError):
    """Integration state became non-finite."""

    category = "blowup"


class ValidationError(FlowEditError):
    """A config, plan, or request failed validation."""

    category = "validation"


class VocabularyError(ValidationError):
    """Unknown word, overfull prompt, or bad token id."""

    category = "vocabulary"


class UnknownAttributeError(ValidationError):
    """Attribute not present in the direction bank."""

    category = "unknown_attribute"


class OracleError(FlowEditError):
    """An attribute oracle was asked to measure an undefined quantity."""

    category = "oracle"


class PersistenceError(FlowEditError):
    """Container could not be read or written."""

    category = "persistence"


class DigestMismatchError(PersistenceError):
    """Stored content digest does not match the payload."""

    category = "digest_mismatch"


class UnsupportedFormatError(PersistenceError):
    """Container format version is unknown."""

    category = "unsupported_format"


class MissingFileError(PersistenceError):
    """A referenced input file does not exist."""

    category = "missing_file"
