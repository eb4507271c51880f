"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError and bad usage exit 2,
everything else here exits 1.
"""


class RoadgenError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RoadgenError):
    """Tensor/array dimensions do not satisfy an operation's contract."""


class MathDomainError(RoadgenError):
    """Input outside an operation's mathematical domain (log of <= 0, ...)."""


class DegenerateEmbeddingError(MathDomainError):
    """An embedding with (near-)zero norm reached a cosine similarity."""


class ContractError(RoadgenError):
    """An API precondition was violated (non-scalar backward root, bad label, ...)."""


class NumericError(RoadgenError):
    """A numeric invariant broke at runtime (NaN/Inf, non-PSD quadratic form)."""


class ConfigError(RoadgenError):
    """Invalid configuration value or file."""


class CheckpointFormatError(RoadgenError):
    """Checkpoint file is corrupt or carries the wrong magic."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint file has an unsupported format version."""


class DataError(RoadgenError):
    """Dataset is empty, malformed, or inconsistent."""


class AnnotationParseError(DataError):
    """An annotation XML file could not be parsed."""
