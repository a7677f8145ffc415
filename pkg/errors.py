"""Exception types raised across the pipeline.

Every error the pipeline raises on bad input derives from PipelineError so the CLI can
tell data problems apart from bugs.
"""


class PipelineError(Exception):
    """Base class for all pipeline errors."""


# --- ingest ---
class SchemaError(PipelineError):
    """A required column is missing from an input table."""


class OrderingError(PipelineError):
    """Timestamps are not strictly increasing."""


class EmptyInputError(PipelineError):
    """An input file holds no data rows."""


class IrregularSamplingError(PipelineError):
    """Inter-sample gaps deviate from the median gap by more than the tolerance."""


class LabelParseError(PipelineError):
    """A label name does not match any intensity label."""


class MappingConflictError(PipelineError):
    """The same annotation maps to two different intensity labels."""


class UnmappedAnnotationError(PipelineError):
    """An annotation string has no entry in the label mapping."""


class InsufficientDataError(PipelineError):
    """Too few samples or participants for the requested computation."""


class MetadataError(PipelineError):
    """Subject metadata is missing or malformed."""


# --- preprocess ---
class FilterDesignError(PipelineError):
    """The requested filter cannot be designed at the recording's rate."""


class IntervalError(PipelineError):
    """Interval lists are malformed (overlapping or inverted)."""


class WindowConfigError(PipelineError):
    """The window duration is incompatible with the sample rate."""


# --- models ---
class DegenerateTrainingError(PipelineError):
    """Training data cannot produce a usable model."""


class InputError(PipelineError):
    """Generic invalid input (non-finite values, empty sequences, ...)."""


class ShapeError(PipelineError):
    """Array dimensions do not match what the model expects."""


class CompatibilityError(PipelineError):
    """A persisted artifact was written by an incompatible version."""


# --- external / evaluate ---
class PredictionValidationError(PipelineError):
    """An external prediction row is not a valid probability vector."""


class AlignmentError(PipelineError):
    """External predictions do not match any window."""


class PairingError(PipelineError):
    """Two collections that must be paired by participant are not."""


class ConfigError(PipelineError):
    """The pipeline configuration is invalid."""
