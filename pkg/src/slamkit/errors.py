"""Exception hierarchy shared by every slamkit module."""


class SlamError(Exception):
    """Base class for all slamkit errors."""


class BehindCameraError(SlamError):
    """A point lies at or behind the camera's depth epsilon."""


class InvalidDepthError(SlamError):
    """Depth supplied for back-projection is not strictly positive."""


class LogSingularityError(SlamError):
    """Rotation angle too close to pi for a well-defined log map."""


class PyramidError(SlamError):
    """Requested pyramid depth does not fit the image."""


class DegenerateGeometryError(SlamError):
    """Rays are parallel or camera centers coincide."""


class DuplicateIdError(SlamError):
    pass


class OutOfOrderError(SlamError):
    pass


class InvalidProblemError(SlamError):
    """Least-squares problem is not evaluable at its initial point."""


class InsufficientConstraintsError(SlamError):
    pass


class NoConvergenceError(SlamError):
    pass


class BootstrapFailure(SlamError):
    """Two-view initialization could not produce a usable relative pose."""


class NotReadyError(SlamError):
    """Not enough excitation/history yet; caller should retry later."""


class InsufficientDataError(SlamError):
    pass


class SynchronizationError(SlamError):
    pass


class DisconnectedGraphError(SlamError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"pose graph is disconnected: components {self.components}")


class TimestampError(SlamError):
    pass


class DatasetError(SlamError):
    """Dataset directory is missing files or contains unparseable lines."""


class ConfigError(SlamError):
    pass


class TrackingFailure(SlamError):
    pass
