"""Exception hierarchy shared across the package.

Everything derives from QembedError so callers can catch the whole family;
the CLI maps subfamilies to distinct exit codes.
"""


class QembedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QembedError):
    """Invalid configuration: bad dimensions, empty splits, out-of-range flags."""


class DataFormatError(QembedError):
    """Malformed input data. Carries file/line context in the message."""


class DimensionError(QembedError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(QembedError, ValueError):
    """Vector norm below the admissible threshold; cannot normalize."""


class DegenerateSuperpositionError(DegenerateVectorError):
    """Weighted word-state sum cancelled to (numerical) zero."""


class NotHermitianError(QembedError, ValueError):
    """Matrix deviates from its conjugate transpose beyond tolerance."""


class IllConditionedProjectorError(QembedError, ValueError):
    """Q^H Q is numerically singular; the rank-r projector is undefined."""


class EmptySentenceError(QembedError, ValueError):
    """A sentence contains no tokens after filtering."""


class NonFiniteGradientError(QembedError, FloatingPointError):
    """A gradient entry is NaN or infinite. Names the parameter group."""


class CheckpointError(QembedError):
    """Unreadable or structurally invalid checkpoint file."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint metadata disagrees with the data/config it is used with."""
