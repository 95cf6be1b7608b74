"""Exception types shared across the pipeline."""


class MotionForgeError(Exception):
    """Base class for all library errors."""


class Unreachable(MotionForgeError):
    """IK exhausted its attempt budget without a valid solution."""


class GenerationExhausted(MotionForgeError):
    """Scene generation could not place required reachable volumes."""


class NoValidPair(MotionForgeError):
    """No valid (start, target) pair found within the attempt budget."""


class EmptyView(MotionForgeError):
    """No camera ray hit any scene surface."""


class EmptyBall(MotionForgeError):
    """A ball-query center has no neighbors within the radius."""


class IkFailed(MotionForgeError):
    """Global planner failed in the IK stage."""


class SearchTimeout(MotionForgeError):
    """Sampling-based search exhausted its budget."""


class ValidationFailed(MotionForgeError):
    """A planned trajectory failed the rejection-sampling validator."""


class Stuck(MotionForgeError):
    """Waypoint-following controller stalled."""


class DegenerateProfile(MotionForgeError):
    """Speed profile is identically zero; smoothness undefined."""


class NonFiniteLoss(MotionForgeError):
    """Training loss became non-finite."""

    def __init__(self, example_id):
        super().__init__(f"non-finite loss at example {example_id}")
        self.example_id = example_id


class CorruptRecord(MotionForgeError):
    """A dataset record failed to parse."""

    def __init__(self, line_number, reason=""):
        super().__init__(f"corrupt record at line {line_number}: {reason}")
        self.line_number = line_number


class VersionMismatch(MotionForgeError):
    """Dataset manifest/file integrity or version error."""
