"""
Synthetic circuit, kinematic pure-pursuit driver and noisy cone sensing.

All randomness in a run comes from one ``numpy.random.Generator`` seeded
from the experiment config, so identical configs replay identical streams.
"""
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.errors import InvalidConfigurationError, TrackGenerationError
from app.pathspace import AgentPose, Detection, compose
from app.schemas import (
    Arc,
    Chicane,
    ExperimentConfig,
    Hairpin,
    SensorModel,
    Straight,
    TrackGroundTruthSchema,
    TrackSpec,
    TurnDirection,
)

logger = logging.getLogger(__name__)

CENTERLINE_STEP = 0.25  # m
CLOSURE_EPS = 1e-6
LEFT_LABEL = "blue"
RIGHT_LABEL = "yellow"


class Primitive:
    """Constant-curvature piece: length m, curvature 1/m (positive turns left)"""

    __slots__ = ("length", "curvature")

    def __init__(self, length: float, curvature: float):
        self.length = length
        self.curvature = curvature

    def advance(self, x: float, y: float, heading: float, s: np.ndarray):
        """Poses after travelling s along this piece"""
        if abs(self.curvature) < 1e-12:
            return x + s * math.cos(heading), y + s * math.sin(heading), np.full_like(s, heading)
        radius = 1.0 / self.curvature
        headings = heading + self.curvature * s
        xs = x + radius * (np.sin(headings) - math.sin(heading))
        ys = y - radius * (np.cos(headings) - math.cos(heading))
        return xs, ys, headings


def element_primitives(element) -> List[Primitive]:
    if isinstance(element, Straight):
        return [Primitive(element.length, 0.0)]
    if isinstance(element, Arc):
        return [Primitive(element.radius * abs(element.angle), math.copysign(1.0 / element.radius, element.angle))]
    sign = 1.0 if element.direction == TurnDirection.LEFT else -1.0
    if isinstance(element, Hairpin):
        return [Primitive(math.pi * element.radius, sign / element.radius)]
    if isinstance(element, Chicane):
        length = element.radius * element.angle
        k = sign / element.radius
        return [Primitive(length, k), Primitive(length, -k), Primitive(length, -k), Primitive(length, k)]
    raise InvalidConfigurationError(f"unknown track element {element!r}")


def track_primitives(spec: TrackSpec) -> List[Primitive]:
    primitives = [p for element in spec.elements for p in element_primitives(element)]
    if spec.total_length is not None:
        scale = spec.total_length / sum(p.length for p in primitives)
        primitives = [Primitive(p.length * scale, p.curvature / scale) for p in primitives]
    return primitives


@dataclass(frozen=True, eq=False)
class TrackGroundTruth:
    centerline: np.ndarray  # (M, 2), start point not repeated
    stations: np.ndarray  # (M,) arc length of each centerline point
    cones: Dict[str, np.ndarray]  # label -> (c, 2)
    lap_length: float
    track_width: float

    def station_of(self, point) -> float:
        distances = np.linalg.norm(self.centerline - np.asarray(point, dtype=float), axis=1)
        return float(self.stations[int(np.argmin(distances))])

    def point_at(self, station: float) -> np.ndarray:
        s = np.append(self.stations, self.lap_length)
        closed = np.vstack([self.centerline, self.centerline[:1]])
        station = station % self.lap_length
        return np.array([np.interp(station, s, closed[:, 0]), np.interp(station, s, closed[:, 1])])

    def start_pose(self) -> AgentPose:
        direction = self.centerline[1] - self.centerline[0]
        return AgentPose(self.centerline[0, 0], self.centerline[0, 1], math.atan2(direction[1], direction[0]))

    @property
    def cone_count(self) -> int:
        return sum(len(c) for c in self.cones.values())

    def to_schema(self) -> TrackGroundTruthSchema:
        return TrackGroundTruthSchema(
            track_width=self.track_width,
            lap_length=self.lap_length,
            centerline=[tuple(p) for p in self.centerline.tolist()],
            cones={label: [tuple(p) for p in cones.tolist()] for label, cones in self.cones.items()},
        )

    @classmethod
    def from_schema(cls, schema: TrackGroundTruthSchema) -> "TrackGroundTruth":
        centerline = np.array(schema.centerline, dtype=float)
        stations = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(centerline, axis=0), axis=1))])
        return cls(
            centerline=centerline,
            stations=stations,
            cones={label: np.array(c, dtype=float).reshape(-1, 2) for label, c in schema.cones.items()},
            lap_length=schema.lap_length,
            track_width=schema.track_width,
        )


def _poses_at(primitives: List[Primitive], stations: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic centerline positions and headings at sorted stations in [0, lap)"""
    points = np.empty((len(stations), 2))
    headings = np.empty(len(stations))
    x = y = heading = 0.0
    start = 0.0
    for primitive in primitives:
        end = start + primitive.length
        mask = (stations >= start) & (stations < end)
        if np.any(mask):
            xs, ys, hs = primitive.advance(x, y, heading, stations[mask] - start)
            points[mask, 0], points[mask, 1], headings[mask] = xs, ys, hs
        ex, ey, eh = primitive.advance(x, y, heading, np.array([primitive.length]))
        x, y, heading = float(ex[0]), float(ey[0]), float(eh[0])
        start = end
    return points, headings


def generate_track(spec: TrackSpec) -> TrackGroundTruth:
    primitives = track_primitives(spec)
    lap_length = sum(p.length for p in primitives)

    x = y = heading = 0.0
    for primitive in primitives:
        ex, ey, eh = primitive.advance(x, y, heading, np.array([primitive.length]))
        x, y, heading = float(ex[0]), float(ey[0]), float(eh[0])
    gap = math.hypot(x, y)
    turn = abs(math.remainder(heading, 2 * math.pi))
    if gap > CLOSURE_EPS or turn > CLOSURE_EPS:
        raise TrackGenerationError(
            f"track elements do not close: end is {gap:.6f} m from the start, heading off by {turn:.6f} rad",
            gap,
        )

    n_points = max(int(math.ceil(lap_length / CENTERLINE_STEP)), 8)
    stations = np.arange(n_points) * lap_length / n_points
    centerline, _ = _poses_at(primitives, stations)

    n_cones = max(int(round(lap_length / spec.cone_spacing)), 3)
    cone_stations = np.arange(n_cones) * lap_length / n_cones
    centers, headings = _poses_at(primitives, cone_stations)
    normals = np.stack([-np.sin(headings), np.cos(headings)], axis=1)
    half = spec.track_width / 2
    cones = {LEFT_LABEL: centers + half * normals, RIGHT_LABEL: centers - half * normals}
    if spec.cone_jitter > 0:
        rng = np.random.default_rng(spec.seed)
        cones = {label: pts + rng.normal(0.0, spec.cone_jitter, pts.shape) for label, pts in cones.items()}
    logger.debug("generated %.1f m track with %d cones per side", lap_length, n_cones)
    return TrackGroundTruth(centerline, stations, cones, lap_length, spec.track_width)


def save_track(truth: TrackGroundTruth, path: Union[str, Path]) -> None:
    Path(path).write_text(truth.to_schema().model_dump_json(indent=2))


def load_track(path: Union[str, Path]) -> TrackGroundTruth:
    return TrackGroundTruth.from_schema(TrackGroundTruthSchema.model_validate_json(Path(path).read_text()))


# ============ Sensing ============
def blind_cones(truth: TrackGroundTruth, fraction: float, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Per-label masks of cones the detector never reports, ``round(fraction * c)`` per label"""
    masks = {}
    for label in sorted(truth.cones):
        count = len(truth.cones[label])
        mask = np.zeros(count, dtype=bool)
        mask[rng.choice(count, size=int(round(fraction * count)), replace=False)] = True
        masks[label] = mask
    return masks


def sense(
    pose: AgentPose,
    truth: TrackGroundTruth,
    model: SensorModel,
    rng: np.random.Generator,
    blind: Optional[Mapping[str, np.ndarray]] = None,
) -> List[Detection]:
    detections = []
    covariance = model.position_noise_std ** 2 * np.eye(2)
    for label in sorted(truth.cones):
        local = pose.to_local(truth.cones[label])
        distance = np.linalg.norm(local, axis=1)
        bearing = np.arctan2(local[:, 1], local[:, 0])
        in_view = (distance <= model.max_range) & (np.abs(bearing) <= model.field_of_view / 2)
        if blind is not None and label in blind:
            in_view &= ~blind[label]
        visible = np.flatnonzero(in_view)
        kept = rng.random(len(visible)) < model.detection_probability
        noise = rng.standard_normal((len(visible), 2)) * model.position_noise_std
        for k, index in enumerate(visible):
            if kept[k]:
                detections.append(Detection(local[index] + noise[k], label, covariance))
    return detections


# ============ Driving ============
def drive_step(
    pose: AgentPose,
    truth: TrackGroundTruth,
    speed: float,
    dt: float,
    odo_noise_std,
    rng: np.random.Generator,
    lookahead: float = 6.0,
) -> Tuple[AgentPose, np.ndarray]:
    """Pure pursuit on the centerline; returns the true new pose and noisy odometry"""
    if dt <= 0:
        raise InvalidConfigurationError("dt must be positive")
    target = truth.point_at(truth.station_of(pose.position) + lookahead)
    local = pose.to_local(target)
    distance = float(np.linalg.norm(local))
    alpha = math.atan2(local[1], local[0])
    kappa = 2.0 * math.sin(alpha) / distance if distance > 0 else 0.0

    travelled = speed * dt
    turn = kappa * travelled
    if abs(turn) < 1e-12:
        displacement = np.array([travelled, 0.0, 0.0])
    else:
        displacement = np.array([math.sin(turn) / kappa, (1.0 - math.cos(turn)) / kappa, turn])
    noisy = displacement + np.asarray(odo_noise_std, dtype=float) * rng.standard_normal(3)
    return compose(pose, displacement), noisy


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    odometry: np.ndarray
    detections: List[Detection]
    true_pose: AgentPose


class StreamHasher:
    """Digest of the odometry/detection stream a backend consumed"""

    def __init__(self):
        self._digest = hashlib.sha256()

    def add(self, frame: Frame) -> None:
        self._digest.update(np.ascontiguousarray(frame.odometry, dtype=float).tobytes())
        for detection in frame.detections:
            self._digest.update(detection.label.encode())
            self._digest.update(np.ascontiguousarray(detection.position, dtype=float).tobytes())

    def hexdigest(self) -> str:
        return self._digest.hexdigest()


@dataclass(frozen=True, eq=False)
class SimulationStream:
    truth: TrackGroundTruth
    frames: List[Frame]
    lap_ends: List[int]  # frame index closing each lap
    initial_pose: AgentPose
    initial_covariance: np.ndarray
    odometry_covariance: np.ndarray
    checksum: str


def simulate(config: ExperimentConfig) -> SimulationStream:
    truth = generate_track(config.track)
    sim = config.simulation
    if sim.speed <= 0:
        raise InvalidConfigurationError("simulation speed must be positive")
    rng = np.random.default_rng(config.seed)
    blind = blind_cones(truth, config.sensor.blind_fraction, rng)
    pose = truth.start_pose()
    initial = pose

    hasher = StreamHasher()
    frames: List[Frame] = []
    lap_ends: List[int] = []
    last_station = truth.station_of(pose.position)
    progress = 0.0
    max_frames = int(math.ceil(1.5 * config.laps * truth.lap_length / (sim.speed * sim.dt))) + 10
    while len(lap_ends) < config.laps:
        if len(frames) >= max_frames:
            raise InvalidConfigurationError("driver failed to complete the requested laps")
        pose, odometry = drive_step(pose, truth, sim.speed, sim.dt, sim.odometry_noise_std, rng, sim.lookahead)
        station = truth.station_of(pose.position)
        progress += (station - last_station + truth.lap_length / 2) % truth.lap_length - truth.lap_length / 2
        last_station = station
        frame = Frame(len(frames), odometry, sense(pose, truth, config.sensor, rng, blind), pose)
        hasher.add(frame)
        frames.append(frame)
        if progress >= truth.lap_length * (len(lap_ends) + 1):
            lap_ends.append(frame.index)

    logger.info("simulated %d frames over %d laps", len(frames), config.laps)
    return SimulationStream(
        truth=truth,
        frames=frames,
        lap_ends=lap_ends,
        initial_pose=initial,
        initial_covariance=np.eye(3) * sim.initial_pose_std ** 2,
        odometry_covariance=np.diag(np.square(sim.odometry_noise_std)),
        checksum=hasher.hexdigest(),
    )
