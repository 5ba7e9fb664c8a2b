"""Exception hierarchy shared by every module."""


class TmlgaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TmlgaError, ValueError):
    pass


class DomainError(TmlgaError, ValueError):
    pass


class EmptyInputError(TmlgaError, ValueError):
    pass


class ParameterError(TmlgaError, ValueError):
    pass


class ContractError(TmlgaError, RuntimeError):
    pass


class RangeError(TmlgaError, ValueError):
    pass


class FormatError(TmlgaError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class ValidationError(TmlgaError, ValueError):
    pass


class ConfigurationError(TmlgaError, ValueError):
    pass


class TrainingDiverged(TmlgaError, RuntimeError):
    pass


class GenerationError(TmlgaError, RuntimeError):
    pass
