"""Exception hierarchy shared across the toolkit.

Validation-type errors (bad configs, unparseable files) are distinguished
from runtime errors (numerical blow-ups, alignment failures) so the CLI
can map them to distinct exit codes.
"""


class ScdError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ScdError):
    """Invalid configuration value or schema violation."""


class ParseError(ScdError):
    """Malformed data file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class AlignmentError(ScdError):
    """Emitted segment count does not match the target identity sequence."""


class DegenerateScaleError(ScdError):
    """Score scaling is undefined because all difference scores are zero."""


class DegenerateEmbeddingError(ScdError):
    """A zero-norm embedding cannot be length-normalized."""


class NumericalError(ScdError):
    """Non-finite values encountered during computation."""


class BoundaryAdjacentError(ScdError):
    """Gradient-check example rejected: too close to a clamp or fire boundary."""


class TrainingDivergedError(ScdError):
    """Training loss became non-finite."""


class MetricError(ScdError):
    """Segmentation metrics are undefined for the given inputs."""
