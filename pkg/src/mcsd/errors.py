"""Exception hierarchy shared across the package."""


class MCSDError(Exception):
    """Base class for all package errors."""


class ConfigError(MCSDError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(MCSDError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(MCSDError, ValueError):
    """A softmax row has no finite entry."""


class ContractError(MCSDError, ValueError):
    """A caller violated a function precondition."""


class VocabularyError(MCSDError, ValueError):
    """Token id outside the vocabulary."""


class DataError(MCSDError):
    """Corpus or checkpoint file is unusable."""


class TrainingError(MCSDError):
    """Training hit a non-finite loss or gradient."""
