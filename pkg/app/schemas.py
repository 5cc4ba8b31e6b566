import math
from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


# Enums
class TurnDirection(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class BackendSelection(str, Enum):
    PATHSPACE = "pathspace"
    CKF = "ckf"
    BOTH = "both"


class OutputFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


# ============ Track Element Schemas ============
class Straight(BaseModel):
    kind: Literal["straight"] = "straight"
    length: float = Field(gt=0)  # m


class Arc(BaseModel):
    kind: Literal["arc"] = "arc"
    radius: float = Field(gt=0)  # m
    angle: float  # rad, positive turns left

    @field_validator("angle")
    @classmethod
    def angle_nonzero(cls, value: float) -> float:
        if value == 0:
            raise ValueError("arc angle must be non-zero")
        return value


class Hairpin(BaseModel):
    """180 degree turn"""
    kind: Literal["hairpin"] = "hairpin"
    radius: float = Field(gt=0)
    direction: TurnDirection = TurnDirection.LEFT


class Chicane(BaseModel):
    """Four arcs (+a, -a, -a, +a): zero net heading change and zero lateral offset"""
    kind: Literal["chicane"] = "chicane"
    radius: float = Field(gt=0)
    angle: float = Field(gt=0, lt=math.pi / 2)
    direction: TurnDirection = TurnDirection.LEFT


TrackElement = Annotated[Union[Straight, Arc, Hairpin, Chicane], Field(discriminator="kind")]


def default_track_elements() -> List[TrackElement]:
    """~500 m circuit: chicane straight, two-corner end, back straight, hairpin"""
    chicane = Chicane(radius=20.0, angle=math.radians(20.0))
    chicane_length = 4 * chicane.radius * math.sin(chicane.angle)
    return [
        Straight(length=60.0),
        chicane,
        Straight(length=177.0 - 60.0 - chicane_length),
        Arc(radius=15.0, angle=math.pi / 2),
        Straight(length=20.0),
        Arc(radius=15.0, angle=math.pi / 2),
        Straight(length=177.0),
        Hairpin(radius=25.0),
    ]


class TrackSpec(BaseModel):
    total_length: Optional[float] = Field(default=None, gt=0)  # rescales the layout when set
    track_width: float = Field(default=4.0, gt=0)
    cone_spacing: float = Field(default=5.0, gt=0)
    cone_jitter: float = Field(default=0.0, ge=0)
    elements: List[TrackElement] = Field(default_factory=default_track_elements, min_length=1)
    seed: int = 0


def circle_track_spec(radius: float, track_width: float = 4.0, cone_spacing: float = 5.0) -> TrackSpec:
    return TrackSpec(
        track_width=track_width,
        cone_spacing=cone_spacing,
        elements=[Arc(radius=radius, angle=2 * math.pi)],
    )


class TrackGroundTruthSchema(BaseModel):
    schema_version: int = SCHEMA_VERSION
    track_width: float
    lap_length: float
    centerline: List[Tuple[float, float]]
    cones: Dict[str, List[Tuple[float, float]]]


# ============ Sensor / Simulation Schemas ============
class SensorModel(BaseModel):
    max_range: float = Field(default=12.0, gt=0)  # m
    field_of_view: float = Field(default=math.radians(110.0), gt=0, le=2 * math.pi)  # rad
    position_noise_std: float = Field(default=0.1, ge=0)  # m
    detection_probability: float = Field(default=0.9, ge=0, le=1)
    blind_fraction: float = Field(default=0.15, ge=0, lt=1)  # share of cones the detector never reports


class SimulationParams(BaseModel):
    speed: float = Field(default=8.0, ge=0)  # m/s
    dt: float = Field(default=0.1, gt=0)  # s
    lookahead: float = Field(default=6.0, gt=0)  # m, pure pursuit
    odometry_noise_std: Tuple[float, float, float] = (0.01, 0.005, 5e-4)  # forward m, lateral m, heading rad
    initial_pose_std: float = Field(default=1e-3, gt=0)

    @field_validator("odometry_noise_std")
    @classmethod
    def noise_nonnegative(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("odometry noise std must be non-negative")
        return value


# ============ Backend Parameter Schemas ============
class PathSpaceParams(BaseModel):
    labels: List[str] = Field(default_factory=lambda: ["blue", "yellow"], min_length=1)
    order: int = Field(default=4, ge=2)
    growth_threshold: float = Field(default=2.0, gt=0)  # m
    separation_threshold: float = Field(default=1.5, gt=0)  # m
    endpoint_u_tolerance: float = Field(default=1e-3, gt=0)
    regularization: float = Field(default=1.0, gt=0)  # lambda
    baseline_weight: float = Field(default=0.2, ge=0, le=1)
    samples_per_control: int = Field(default=20, ge=2)
    simplify_every: int = Field(default=100, ge=1)  # frames, while open
    control_spacing: float = Field(default=12.0, gt=0)  # m of boundary per control point after simplification
    min_path_length: float = Field(default=150.0, gt=0)  # m
    closure_radius: float = Field(default=15.0, gt=0)  # m
    closure_tolerance: float = Field(default=1.0, gt=0)  # m
    early_segment_fraction: float = Field(default=0.1, gt=0, lt=1)
    min_measurement_variance: float = Field(default=1e-6, gt=0)  # m^2
    bootstrap_merge_radius: float = Field(default=1.0, gt=0)  # m


class CKFParams(BaseModel):
    gate: float = Field(default=3.0, gt=0)  # Mahalanobis
    min_measurement_variance: float = Field(default=1e-6, gt=0)


# ============ Experiment Schemas ============
class ExperimentConfig(BaseModel):
    schema_version: int = SCHEMA_VERSION
    track: TrackSpec = Field(default_factory=TrackSpec)
    sensor: SensorModel = Field(default_factory=SensorModel)
    simulation: SimulationParams = Field(default_factory=SimulationParams)
    backend: BackendSelection = BackendSelection.BOTH
    pathspace: PathSpaceParams = Field(default_factory=PathSpaceParams)
    ckf: CKFParams = Field(default_factory=CKFParams)
    laps: int = Field(default=5, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_version(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        return self

    def backends(self) -> List[str]:
        if self.backend == BackendSelection.BOTH:
            return [BackendSelection.PATHSPACE.value, BackendSelection.CKF.value]
        return [self.backend.value]


class ScalabilityRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    map_sizes: List[int] = Field(default_factory=lambda: [50, 100, 200, 400, 800], min_length=1)
    readings_per_update: List[int] = Field(default_factory=lambda: [2, 4, 8], min_length=1)
    repeats: int = Field(default=10, ge=3)


# ============ Metric Schemas ============
class LapMetrics(BaseModel):
    lap: int = Field(ge=1)
    backend: str
    rmse: Optional[float]  # m, None when every cone is missed
    map_size: int
    missed_fraction: float = Field(ge=0, le=1)
    ghost_count: int = Field(ge=0)
    mean_update_time: float  # s


class BackendFailure(BaseModel):
    backend: str
    frame: int
    detail: str


class ComparisonResponse(BaseModel):
    metrics: List[LapMetrics]
    failures: List[BackendFailure] = []
    stream_checksums: Dict[str, str] = {}


class ScalabilityCell(BaseModel):
    backend: str
    map_size: int
    readings: int
    update_time: float  # s, mean over repeats


# ============ Snapshot Schemas ============
class PoseSchema(BaseModel):
    x: float
    y: float
    heading: float


class SplineSnapshot(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    label: str
    order: int
    knots: List[float]
    control_points: List[Tuple[float, float]]
    closed: bool
    offset: int


class BeliefSnapshot(BaseModel):
    schema_version: int = SCHEMA_VERSION
    pose: PoseSchema
    splines: List[SplineSnapshot]
    dimension: int
    covariance_lower: List[float]  # row-major lower triangle incl. diagonal


class LandmarkSnapshot(BaseModel):
    label: str
    position: Tuple[float, float]


class LandmarkMapSnapshot(BaseModel):
    schema_version: int = SCHEMA_VERSION
    pose: PoseSchema
    landmarks: List[LandmarkSnapshot]
    dimension: int
    covariance_lower: List[float]
