class RecontrackError(Exception):
    """Base class for errors raised by this package."""


class InvalidDepthError(RecontrackError, ValueError):
    pass


class BehindCameraError(RecontrackError, ValueError):
    pass


class DimensionMismatchError(RecontrackError, ValueError):
    pass


class TooFewPointsError(RecontrackError, ValueError):
    pass


class DegenerateGeometryError(RecontrackError, ValueError):
    pass


class MissingFlowError(RecontrackError, KeyError):
    pass


class OutOfOrderFrameError(RecontrackError, ValueError):
    pass


class ConfigError(RecontrackError, ValueError):
    pass


class InputFormatError(RecontrackError, ValueError):
    """Malformed input file. Carries the path and byte offset of the problem."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        self.message = message
        super().__init__(f"{self.path}: byte {self.offset}: {message}")
