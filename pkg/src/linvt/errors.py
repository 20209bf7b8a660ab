"""Exception types raised across the package."""


class LinVTError(Exception):
    """Base class for every error raised by ``linvt``."""


class DimensionError(LinVTError, ValueError):
    pass


class NumericInputError(LinVTError, ValueError):
    pass


class WindowError(LinVTError, ValueError):
    pass


class SelectionError(LinVTError, ValueError):
    pass


class HeadSplitError(LinVTError, ValueError):
    pass


class BackwardError(LinVTError, RuntimeError):
    pass


class ChannelMismatchError(LinVTError, ValueError):
    pass


class ConfigError(LinVTError, ValueError):
    pass


class CapacityError(LinVTError, ValueError):
    pass


class DivergenceError(LinVTError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value


class FormatError(LinVTError, ValueError):
    """A binary file could not be parsed."""


class CorruptFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ShapeMismatchError(LinVTError, ValueError):
    pass
