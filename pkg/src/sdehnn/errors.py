"""Exception hierarchy shared by every module of the package."""


class SdeHnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SdeHnnError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SdeHnnError, FloatingPointError):
    """A NaN or infinity appeared in a computation."""


class ConfigError(SdeHnnError, ValueError):
    """A configuration value is out of its admissible range."""


class SchemaError(SdeHnnError, ValueError):
    """Input data does not follow the expected schema."""


class ParseError(SdeHnnError, ValueError):
    """A cell of an input file could not be parsed."""


class CheckpointError(SdeHnnError, ValueError):
    """A checkpoint is unreadable or does not match the model it is loaded into."""


class TrainingError(SdeHnnError, RuntimeError):
    """Optimization diverged."""
