"""Exception types raised across the workbench."""


class RailOdoError(Exception):
    """Base class for all workbench errors."""


# geometry
class BehindCamera(RailOdoError):
    pass


class DegenerateRay(RailOdoError):
    pass


class GimbalDegenerate(RailOdoError):
    pass


# simulator
class DiscontinuousTangent(RailOdoError):
    pass


class ProfileOverrunsPath(RailOdoError):
    pass


class ConfigError(RailOdoError, ValueError):
    """Bad or missing configuration key. ``key`` and ``line`` locate the problem."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class LogParseError(RailOdoError, ValueError):
    def __init__(self, message, path=None, line=None):
        loc = f"{path}:{line}: " if path is not None else ""
        super().__init__(loc + message)
        self.path = path
        self.line = line


# preintegration
class EmptyWindow(RailOdoError):
    pass


class NonMonotonicTimestamps(RailOdoError):
    pass


# estimator
class NonAdjacentStates(RailOdoError):
    pass


class SolverDiverged(RailOdoError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class RankDeficient(RailOdoError):
    pass


class InsufficientObservations(RailOdoError):
    pass


# evaluation
class NoOverlap(RailOdoError):
    pass


class TrajectoryTooShort(RailOdoError):
    pass


class DegenerateAlignment(RailOdoError):
    pass


class EmptyErrorSet(RailOdoError):
    pass
