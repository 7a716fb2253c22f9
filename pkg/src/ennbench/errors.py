"""Shared exception types.

Every error carries a stable machine-parsable class token so the CLI can
emit single-line failures like ``missing-artifact: <detail>``.
"""


class EnnBenchError(Exception):
    """Base class for all library errors."""

    error_class = "internal-error"


class ShapeError(EnnBenchError):
    """Dimension or dtype mismatch between arrays."""

    error_class = "shape-error"


class ContractError(EnnBenchError):
    """A caller violated a documented precondition."""

    error_class = "contract-error"


class NonFiniteError(EnnBenchError):
    """NaN or Inf appeared in a value or gradient; never propagated."""

    error_class = "non-finite"


class FormatError(EnnBenchError):
    """A file did not match its declared on-disk format."""

    error_class = "format-error"


class DigestError(EnnBenchError):
    """A checkpoint was truncated or its content digest did not match."""

    error_class = "digest-error"


class TrainingError(EnnBenchError):
    """Optimization diverged or an invariant broke during training."""

    error_class = "training-error"


class DegenerateBaselineError(EnnBenchError):
    """A corruption-error baseline summed to zero for some type."""

    error_class = "degenerate-baseline"


class MissingArtifactError(EnnBenchError):
    """A required checkpoint or dataset file is absent."""

    error_class = "missing-artifact"


class ConfigError(EnnBenchError):
    """A run configuration failed validation."""

    error_class = "config-error"
