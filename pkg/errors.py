"""
Error types for LaneTopoLab
Every failure the library raises on purpose derives from LaneTopoError so the
launcher can map it to an exit code.
"""

from typing import Any, Dict, List, Optional


class LaneTopoError(Exception):
    """Base class for all LaneTopoLab errors"""


class ConfigurationError(LaneTopoError, ValueError):
    """Invalid or infeasible configuration"""


class UsageError(LaneTopoError, ValueError):
    """An operation was called outside its contract"""


class DimensionError(LaneTopoError, ValueError):
    """Array shapes do not agree"""


class GeometryError(LaneTopoError, ValueError):
    """Degenerate or out-of-window geometry"""


class SizeError(LaneTopoError, ValueError):
    """Not enough predictions to satisfy an assignment"""


class CheckpointVersionError(LaneTopoError, ValueError):
    """Checkpoint format or config does not match what the caller expects"""


class SceneParseError(LaneTopoError, ValueError):
    """Scene document violates the JSON schema"""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnsupportedVersionError(SceneParseError):
    """Scene document declares a schema version we cannot read"""


class NumericError(LaneTopoError, ArithmeticError):
    """Non-finite values where finite ones are required"""


class DivergenceError(NumericError):
    """Training produced a non-finite loss"""

    def __init__(self, step: int, last_losses: Optional[List[Dict[str, Any]]] = None):
        self.step = step
        self.last_losses = last_losses or []
        last = self.last_losses[-1] if self.last_losses else {}
        super().__init__(f"Non-finite loss at step {step}; last finite losses: {last}")


class EmptyMaskWarning(UserWarning):
    """A loss was asked to average over an empty mask and returned 0"""
