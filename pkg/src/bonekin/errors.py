"""Exception types raised across the package."""


class BonekinError(Exception):
    pass


class ShapeError(BonekinError, ValueError):
    pass


class ConfigError(BonekinError, ValueError):
    pass


# skeleton
class CycleError(BonekinError, ValueError):
    pass


class ForestError(BonekinError, ValueError):
    pass


class DegenerateBoneError(BonekinError, ValueError):
    pass


class ZeroDirectionError(BonekinError, ValueError):
    pass


class BehindCameraError(BonekinError, ValueError):
    pass


# metrics
class DegenerateFrameError(BonekinError, ValueError):
    pass


class TooShortError(BonekinError, ValueError):
    pass


# nn / training
class BatchTooSmallError(BonekinError, ValueError):
    pass


class NonFiniteGradientError(BonekinError, FloatingPointError):
    pass


class NonFiniteLossError(BonekinError, FloatingPointError):
    pass


class EmptyDatasetError(BonekinError, ValueError):
    pass


# io
class FormatError(BonekinError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TopologyMismatchError(BonekinError, ValueError):
    pass
