"""Exception hierarchy for the SLAM engine."""

from typing import Optional


class G2SError(Exception):
    """Base class for every error raised by the engine."""


class InsufficientPointsError(G2SError):
    def __init__(self, available: int, required: int):
        super().__init__(f"insufficient points: {available} available, {required} required")
        self.available = available
        self.required = required


class CovarianceError(G2SError):
    pass


class InvalidDepthError(G2SError):
    pass


class TrackingLostError(G2SError):
    def __init__(self, matched: int, required: int, frame_index: Optional[int] = None):
        where = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"tracking lost{where}: {matched} matched points, {required} required")
        self.matched = matched
        self.required = required
        self.frame_index = frame_index


class EmptyMaskError(G2SError):
    def __init__(self, term: str = "loss"):
        super().__init__(f"no supervised pixels for {term}")
        self.term = term


class SceneMismatchError(G2SError):
    pass


class FrozenPoseError(G2SError):
    pass


class AssociationError(G2SError):
    pass


class DatasetError(G2SError):
    def __init__(self, message: str, frame_index: Optional[int] = None, line_number: Optional[int] = None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        if line_number is not None:
            message = f"{message} (line {line_number})"
        super().__init__(message)
        self.frame_index = frame_index
        self.line_number = line_number


class ConfigError(G2SError):
    pass
