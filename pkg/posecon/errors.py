"""
Error types shared by every posecon module.

The CLI maps these onto exit codes (see ``segment.py``).
"""


class PoseconError(Exception):
    """Base class for all library errors."""


# ---------------------------------------------------------------------------
# Input / shape errors
# ---------------------------------------------------------------------------

class InvalidInput(PoseconError, ValueError):
    pass


class DegeneratePose(PoseconError, ValueError):
    """All keypoints coincide, so the pose has no scale."""


class ShapeMismatch(PoseconError, ValueError):
    pass


class StaleCache(PoseconError, ValueError):
    """An activation cache does not belong to the parameters it is used with."""


class IndexOutOfRange(PoseconError, IndexError):
    pass


class EmptySequence(PoseconError, ValueError):
    pass


class InfeasibleTranscript(PoseconError, ValueError):
    pass


class LengthMismatch(PoseconError, ValueError):
    pass


class ConfigError(PoseconError, ValueError):
    pass


# ---------------------------------------------------------------------------
# File errors
# ---------------------------------------------------------------------------

class ParseError(PoseconError):
    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class DimensionError(PoseconError, ValueError):
    pass


class IoError(PoseconError, OSError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class NumericDivergence(PoseconError, ArithmeticError):
    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
