"""Exception types shared across the toolkit."""


class RangeError(ValueError):
    """A numeric argument lies outside its documented range."""


class ShapeError(ValueError):
    """Array arguments have inconsistent or unexpected shapes."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (zero vector, empty selection)."""


class ProjectionError(ValueError):
    """Point cannot be projected (at or behind the camera plane)."""


class ConfigurationError(ValueError):
    """Configuration values are inconsistent or unsupported."""


class LengthError(ValueError):
    """A signal or buffer is too short. ``required`` carries the minimum."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class GeometryError(ValueError):
    """Positions violate the scene geometry (outside the room, etc.)."""


class InfeasibleSceneError(RuntimeError):
    """Constrained sampling exhausted its rejection budget."""


class EstimationError(RuntimeError):
    """No usable signal content for an estimate."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class ParseError(ValueError):
    """Text does not match the expected grammar. ``span`` holds the bad text."""

    def __init__(self, message, span=None):
        super().__init__(message)
        self.span = span


class FormatError(ValueError):
    """A binary file is malformed (bad magic, truncation, wrong version)."""


class ValidationError(ValueError):
    """A dataset record violates its schema or invariants."""


class GenerationError(RuntimeError):
    """Sample generation could not satisfy task constraints."""


class TrainingDivergedError(RuntimeError):
    """Training loss diverged beyond the configured guard."""


class AlignmentError(ValueError):
    """Prediction and ground-truth collections do not align."""


class GroundingError(RuntimeError):
    """Too little visual evidence to ground an instance."""
