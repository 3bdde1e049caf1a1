"""
Exception hierarchy for PlaneBA.

Every error raised on purpose by the package derives from PlaneBAError.
Errors describing bad inputs also derive from ValueError so callers that
only know the standard library can still catch them.
"""


class PlaneBAError(Exception):
    """Base class for all PlaneBA errors."""


# --- geometry / factors ---

class DegeneratePlane(PlaneBAError, ValueError):
    """Plane is undefined for the requested use (camera on plane, d = 0)."""


class PointBehindCamera(PlaneBAError, ValueError):
    """Landmark has non-positive depth in the observing camera."""


class EmptyWindow(PlaneBAError, ValueError):
    """No IMU samples between two keyframes."""


class MixedKeys(PlaneBAError, ValueError):
    """Factors merged into one compressed factor do not share their keys."""


class EmptyPointSet(PlaneBAError, ValueError):
    """An operation that needs points received none."""


class MissingState(PlaneBAError, KeyError):
    """A factor references a state id that does not exist."""


class RankDeficient(PlaneBAError, ValueError):
    """Least-squares system does not have full column rank."""


class RayParallelToPlane(PlaneBAError, ValueError):
    """Viewing ray does not intersect the plane."""


# --- solver ---

class LinearSolveFailure(PlaneBAError):
    """Reduced normal equations stayed indefinite after damping retries."""


class InvalidProblem(PlaneBAError, ValueError):
    """Problem is malformed or has nothing to optimize."""


class InvalidVariant(PlaneBAError, ValueError):
    """Unknown bundle-adjustment variant name."""


class DisconnectedGraph(PlaneBAError, ValueError):
    """Pose-plane graph has keyframes unreachable from the gauge keyframe."""


# --- simulation / evaluation ---

class InfeasibleTrajectory(PlaneBAError, ValueError):
    """Trajectory exceeds the configured velocity, acceleration or rate limits."""


class WorldSpecError(PlaneBAError, ValueError):
    """World specification is invalid."""


class LengthMismatch(PlaneBAError, ValueError):
    """Trajectories passed to an evaluation do not match up."""


class EmptyReport(PlaneBAError, ValueError):
    """A report was requested for no results."""


# --- configuration / storage ---

class ConfigError(PlaneBAError, ValueError):
    """Unknown or malformed configuration value."""


class VersionMismatch(PlaneBAError):
    """Stored format has an unsupported major version."""


class CorruptRecord(PlaneBAError):
    """A stored record could not be parsed."""

    def __init__(self, source, index, reason):
        self.source = str(source)
        self.index = index
        self.reason = reason
        super().__init__(f"{self.source}: record {index}: {reason}")


class IoFailure(PlaneBAError, OSError):
    """Filesystem operation failed."""
