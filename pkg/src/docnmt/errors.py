"""Exception types shared across the toolkit."""


class DocNMTError(Exception):
    """Base class for every error raised by docnmt."""


class DimensionError(DocNMTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DocNMTError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(DocNMTError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigurationError(DocNMTError, ValueError):
    """Invalid model, training, or decoding configuration."""


class CorpusError(DocNMTError, ValueError):
    """Malformed corpus or vocabulary input."""
