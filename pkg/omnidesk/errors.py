"""Exception hierarchy shared by every omnidesk component.

Each error carries a machine-parsable ``code`` and the process exit code the
CLI should use when it escapes to the top level.
"""

from typing import Any, Dict, Optional


class OmniError(Exception):
    """Base class for all omnidesk errors."""

    code = "RUNTIME_ERROR"
    exit_code = 3

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self, ref: Optional[str] = None) -> Dict[str, Any]:
        record = {"error": self.code, "message": self.message}
        if self.details:
            record["details"] = {k: str(v) for k, v in self.details.items()}
        if ref:
            record["ref"] = ref
        return record


class ConfigError(OmniError):
    code = "CONFIG_INVALID"
    exit_code = 2

    def __init__(self, message: str, problems: Optional[list] = None):
        super().__init__(message)
        self.problems = problems or []

    def to_record(self, ref: Optional[str] = None) -> Dict[str, Any]:
        record = super().to_record(ref)
        if self.problems:
            record["problems"] = self.problems
        return record


class DimensionMismatchError(OmniError):
    code = "DIMENSION_MISMATCH"


class NonFiniteError(OmniError):
    code = "NON_FINITE"


class StatsMismatchError(OmniError):
    code = "STATS_MISMATCH"


class EmptyInputError(OmniError):
    code = "EMPTY_INPUT"


class SampleRateError(OmniError):
    code = "SAMPLE_RATE_MISMATCH"


class ValueRangeError(OmniError):
    code = "VALUE_OUT_OF_RANGE"


class KeypointRangeError(OmniError):
    code = "KEYPOINT_OUT_OF_RANGE"


class TooManyMotionFramesError(OmniError):
    code = "TOO_MANY_MOTION_FRAMES"


class MissingSignalError(OmniError):
    code = "MISSING_SIGNAL"


class UndefinedMetricError(OmniError):
    code = "METRIC_UNDEFINED"


class MaskEmptyError(OmniError):
    code = "MASK_EMPTY"


class CheckpointError(OmniError):
    code = "CHECKPOINT_INVALID"


class HashMismatchError(CheckpointError):
    code = "CONFIG_HASH_MISMATCH"


class ClipLoadError(OmniError):
    code = "CLIP_LOAD_FAILED"

    def __init__(self, clip_id: str, message: str):
        super().__init__(f"clip {clip_id}: {message}", clip_id=clip_id)
        self.clip_id = clip_id
