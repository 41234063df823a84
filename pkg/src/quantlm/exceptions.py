"""Exception hierarchy shared across the package."""


class QuantLMError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QuantLMError, ValueError):
    """Operands have incompatible shapes."""


class NumericalError(QuantLMError, FloatingPointError):
    """A non-finite value showed up where finite values are required."""


class MissingDependencyError(QuantLMError, ValueError):
    """A parameter does not feed into the loss it was differentiated against."""


class DegenerateInputError(QuantLMError, ValueError):
    """Input is too small or too degenerate for the operation (e.g. length-1 layer norm)."""


class StateMismatchError(QuantLMError, ValueError):
    """An incremental attention cache was presented to the wrong layer."""


class DegenerateScaleError(QuantLMError, ValueError):
    """A quantization scale cannot be fit (all-zero weight cluster)."""


class TrainingDivergedError(QuantLMError, RuntimeError):
    """Training produced a non-finite loss."""


class InfeasibleBudgetError(QuantLMError, ValueError):
    """No bit assignment satisfies the requested precision budget."""


class CheckpointFormatError(QuantLMError, ValueError):
    """A checkpoint file is corrupt or structurally incompatible."""


class DataError(QuantLMError, ValueError):
    """Corpus files are missing, empty, or malformed."""


class IncompatibilityError(QuantLMError, ValueError):
    """Models with mismatched architectures cannot be combined."""


class ConfigError(QuantLMError, ValueError):
    """A configuration file or option is invalid."""
