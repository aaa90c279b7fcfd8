"""Exception hierarchy. Every error raised on purpose derives from PlaneFieldError."""


class PlaneFieldError(Exception):
    """Base class for all package errors."""


# geometry
class InvalidDepth(PlaneFieldError, ValueError):
    pass


class OutOfBounds(PlaneFieldError, ValueError):
    pass


class DegeneratePlane(PlaneFieldError, ValueError):
    pass


# plane fitting
class TooFewPoints(PlaneFieldError, ValueError):
    pass


class InvalidParams(PlaneFieldError, ValueError):
    pass


class DegenerateFit(PlaneFieldError, ValueError):
    pass


# memory bank
class NotCanonical(PlaneFieldError, ValueError):
    pass


class EmptyPointSet(PlaneFieldError, ValueError):
    pass


class BankOverflow(PlaneFieldError, RuntimeError):
    pass


# neural field
class ShapeError(PlaneFieldError, ValueError):
    pass


class StaleCache(PlaneFieldError, RuntimeError):
    pass


class NonFiniteGradient(PlaneFieldError, FloatingPointError):
    pass


# rendering
class DegenerateRay(PlaneFieldError, ValueError):
    pass


class LabelOutOfRange(PlaneFieldError, IndexError):
    pass


# pipeline
class SkippedFrame(PlaneFieldError):
    pass


class EmptyDataset(PlaneFieldError, ValueError):
    pass


# metrics
class EmptyInput(PlaneFieldError, ValueError):
    pass


# dataio
class DatasetFormatError(PlaneFieldError, ValueError):
    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class ModeDataMissing(PlaneFieldError, ValueError):
    pass


class SpecError(PlaneFieldError, ValueError):
    pass


class IoError(PlaneFieldError, OSError):
    pass


class RunError(PlaneFieldError, RuntimeError):
    """A training run aborted; carries where it happened and why."""

    def __init__(self, frame, step, phase, cause):
        super().__init__(f"run aborted at frame {frame}, step {step} ({phase}): "
                         f"{type(cause).__name__}: {cause}")
        self.frame, self.step, self.phase, self.cause = frame, step, phase, cause

    def report(self) -> dict:
        return {"error": type(self.cause).__name__, "message": str(self.cause),
                "frame": self.frame, "step": self.step, "phase": self.phase}
