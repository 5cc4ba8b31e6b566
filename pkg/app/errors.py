from typing import Optional


class PathSpaceError(Exception):
    """Base error for the mapping backend, simulator and harness"""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidConfigurationError(PathSpaceError):
    """Parameters violate a documented range or shape"""


class InvalidArgumentError(PathSpaceError):
    """An operation received an argument it cannot act on"""


class InvalidStateError(PathSpaceError):
    """An operation is not allowed in the current state (e.g. extending a closed spline)"""


class DomainError(PathSpaceError):
    """Spline parameter outside the spline domain"""


class ClosureRejectedError(PathSpaceError):
    """Loop closure refused: endpoints too far apart or the closed fit deviates too much"""


class NumericError(PathSpaceError):
    """A factorization or inversion failed"""


class PropagationError(PathSpaceError):
    """A map failed on one of the cubature points"""

    def __init__(self, detail: str, point_index: int):
        super().__init__(detail)
        self.point_index = point_index


class TrackGenerationError(PathSpaceError):
    """Track elements do not close into a circuit"""

    def __init__(self, detail: str, residual_gap: float):
        super().__init__(detail)
        self.residual_gap = residual_gap


class FrameProcessingError(PathSpaceError):
    """A sub-operation failed while processing one frame"""

    def __init__(self, frame: int, cause: PathSpaceError, label: Optional[str] = None):
        where = f"frame {frame}" if label is None else f"frame {frame}, boundary '{label}'"
        super().__init__(f"{where}: {cause.detail}")
        self.frame = frame
        self.label = label
        self.cause = cause


class EmitError(PathSpaceError):
    """Results could not be written"""
