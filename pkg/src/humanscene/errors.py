"""Exception hierarchy shared across the package.

``ValidationError`` subclasses map to CLI exit code 2 and ``NumericalError``
subclasses to exit code 3.
"""


class HumanSceneError(Exception):
    pass


class ValidationError(HumanSceneError, ValueError):
    pass


class NumericalError(HumanSceneError, ArithmeticError):
    pass


# geometry
class AngleAtCut(NumericalError):
    pass


class BehindCamera(ValidationError):
    pass


class NonPositiveScale(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


# scene
class DisconnectedGraph(ValidationError):
    pass


class DegenerateMatches(NumericalError):
    pass


# human / pipeline
class OutOfRange(ValidationError):
    pass


class IndexMismatch(ValidationError):
    pass


class MissingOverlap(ValidationError):
    pass


class NoValidFrames(ValidationError):
    pass


# optimization
class NonFiniteLoss(NumericalError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# synthesis
class InvalidSpec(ValidationError):
    pass


# evaluation
class DegenerateConfiguration(NumericalError):
    pass


class LengthMismatch(ValidationError):
    pass


class ZeroPathLength(ValidationError):
    pass


class NoValidPixels(ValidationError):
    pass


class EmptyCloud(ValidationError):
    pass


# bundle IO
class ParseError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class VersionError(ValidationError):
    pass
