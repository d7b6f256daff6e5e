"""Exception hierarchy shared by every module."""


class FFABError(Exception):
    """Base class for all package errors."""


class ConfigError(FFABError, ValueError):
    """Invalid configuration (head counts, window sizes, slice layout, ...)."""


class ContractError(FFABError, ValueError):
    """A caller violated a shape or ordering contract."""


class InputError(FFABError, ValueError):
    """Bad user input: image too small, empty dataset, timestep out of range."""


class FormatError(FFABError, ValueError):
    """Malformed bitstream or checkpoint file."""


class ModelError(FFABError, ValueError):
    """Bitstream or checkpoint was produced by a different model."""


class IntegrityError(FFABError, RuntimeError):
    """Entropy decoder state diverged from the encoder."""


class StateError(FFABError, RuntimeError):
    """An object was used before it was initialised or trained."""


class RangeError(FFABError, ValueError):
    """RD curves do not overlap in quality."""


class DivergenceError(FFABError, RuntimeError):
    """Training produced a non-finite loss."""
