"""
Experiment runner and metrics: per-lap backend comparison, scalability sweep
and result emission.
"""
import csv
import logging
import math
import time
from functools import singledispatch
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import TypeAdapter, ValidationError
from scipy.spatial.distance import cdist

from app.ckf_baseline import CKFMapper, LandmarkMap
from app.ckf_baseline import step as ckf_step
from app.config import Settings
from app.errors import EmitError, InvalidArgumentError, InvalidConfigurationError, PathSpaceError
from app.pathspace import (
    AgentPose,
    Detection,
    JointBelief,
    PathSpaceMapper,
    process_frame,
    simplification_budget,
    simplify,
)
from app.schemas import (
    BackendFailure,
    ComparisonResponse,
    ExperimentConfig,
    LapMetrics,
    OutputFormat,
    ScalabilityCell,
)
from app.simworld import RIGHT_LABEL, StreamHasher, TrackGroundTruth, generate_track, simulate
from app.spline_core import fit_spline, periodic_knots, project_many

logger = logging.getLogger(__name__)

MISSED_THRESHOLD = 3.0  # m
GHOST_RADIUS = 1.5  # m
METRIC_COLUMNS = ("lap", "backend", "rmse_m", "size", "missed_pct", "ghosts", "update_ms")
SCALABILITY_COLUMNS = ("backend", "map_size", "readings", "update_ms")


class Coverage(NamedTuple):
    rmse: Optional[float]  # m, None when every cone is missed
    missed_fraction: float


# ============ Metrics ============
@singledispatch
def reference_distances(map_representation, truth: TrackGroundTruth) -> np.ndarray:
    """Distance from every ground-truth cone to its nearest mapped point"""
    raise InvalidArgumentError(f"unsupported map type {type(map_representation).__name__}")


@reference_distances.register
def _(belief: JointBelief, truth: TrackGroundTruth) -> np.ndarray:
    parts = []
    for label in sorted(truth.cones):
        cones = truth.cones[label]
        spline = belief.splines.get(label)
        if spline is None:
            parts.append(np.full(len(cones), np.inf))
        else:
            parts.append(np.array([p.distance for p in project_many(spline, cones)]))
    return np.concatenate(parts) if parts else np.empty(0)


@reference_distances.register
def _(landmark_map: LandmarkMap, truth: TrackGroundTruth) -> np.ndarray:
    labels = np.array(landmark_map.labels)
    parts = []
    for label in sorted(truth.cones):
        cones = truth.cones[label]
        mapped = landmark_map.positions[labels == label] if len(labels) else np.empty((0, 2))
        if len(mapped) == 0:
            parts.append(np.full(len(cones), np.inf))
        else:
            parts.append(cdist(cones, mapped).min(axis=1))
    return np.concatenate(parts) if parts else np.empty(0)


def rmse_and_coverage(map_representation, truth: TrackGroundTruth, threshold: float = MISSED_THRESHOLD) -> Coverage:
    """Cones farther than ``threshold`` from the map count as missed and are left out of the RMSE"""
    distances = reference_distances(map_representation, truth)
    if distances.size == 0:
        return Coverage(None, 0.0)
    missed = distances > threshold
    kept = distances[~missed]
    rmse = float(np.sqrt(np.mean(kept ** 2))) if kept.size else None
    return Coverage(rmse, float(missed.mean()))


@singledispatch
def count_ghosts(map_representation, truth: TrackGroundTruth, radius: float = GHOST_RADIUS) -> int:
    raise InvalidArgumentError(f"unsupported map type {type(map_representation).__name__}")


@count_ghosts.register
def _(belief: JointBelief, truth: TrackGroundTruth, radius: float = GHOST_RADIUS) -> int:
    return 0


@count_ghosts.register
def _(landmark_map: LandmarkMap, truth: TrackGroundTruth, radius: float = GHOST_RADIUS) -> int:
    labels = np.array(landmark_map.labels)
    ghosts = 0
    for label, cones in truth.cones.items():
        mapped = landmark_map.positions[labels == label] if len(labels) else np.empty((0, 2))
        if len(mapped) == 0:
            continue
        near = (cdist(cones, mapped) <= radius).sum(axis=1)
        ghosts += int(np.maximum(near - 1, 0).sum())
    return ghosts


# ============ Comparison ============
class ComparisonResult(NamedTuple):
    metrics: List[LapMetrics]
    failures: List[BackendFailure]
    stream_checksums: Dict[str, str]

    def to_response(self) -> ComparisonResponse:
        return ComparisonResponse(
            metrics=self.metrics, failures=self.failures, stream_checksums=self.stream_checksums
        )


def make_mapper(backend: str, config: ExperimentConfig, pose: AgentPose, pose_covariance, odo_noise):
    if backend == "pathspace":
        return PathSpaceMapper(config.pathspace, pose, pose_covariance, odo_noise)
    if backend == "ckf":
        return CKFMapper(config.ckf, pose, pose_covariance, odo_noise)
    raise InvalidConfigurationError(f"unknown backend '{backend}'")


def run_comparison(config: ExperimentConfig) -> ComparisonResult:
    """Replay one seeded stream through each selected backend, scoring at every lap end"""
    stream = simulate(config)
    lap_of_frame = {frame: lap for lap, frame in enumerate(stream.lap_ends, start=1)}
    metrics: List[LapMetrics] = []
    failures: List[BackendFailure] = []
    checksums: Dict[str, str] = {}

    for backend in config.backends():
        mapper = make_mapper(
            backend, config, stream.initial_pose, stream.initial_covariance, stream.odometry_covariance
        )
        hasher = StreamHasher()
        durations: List[float] = []
        for frame in stream.frames:
            hasher.add(frame)
            started = time.perf_counter()
            try:
                mapper.step(frame.detections, frame.odometry)
            except (PathSpaceError, np.linalg.LinAlgError) as exc:
                detail = getattr(exc, "detail", str(exc))
                logger.error("%s failed at frame %d: %s", backend, frame.index, detail)
                failures.append(BackendFailure(backend=backend, frame=frame.index, detail=detail))
                break
            durations.append(time.perf_counter() - started)
            lap = lap_of_frame.get(frame.index)
            if lap is not None:
                coverage = rmse_and_coverage(mapper.map_representation, stream.truth)
                metrics.append(LapMetrics(
                    lap=lap,
                    backend=backend,
                    rmse=coverage.rmse,
                    map_size=mapper.map_size,
                    missed_fraction=coverage.missed_fraction,
                    ghost_count=count_ghosts(mapper.map_representation, stream.truth),
                    mean_update_time=float(np.mean(durations)) if durations else 0.0,
                ))
                logger.info(
                    "lap %d %s: rmse=%s size=%d missed=%.1f%%",
                    lap, backend, coverage.rmse, mapper.map_size, 100 * coverage.missed_fraction,
                )
                durations = []
        checksums[backend] = hasher.hexdigest()

    if len(set(checksums.values())) > 1:
        logger.error("backends consumed different streams: %s", checksums)
    else:
        logger.info("stream checksum %s", stream.checksum)
    return ComparisonResult(metrics, failures, checksums)


# ============ Scalability ============
def boundary_points(truth: TrackGroundTruth, label: str, stations) -> np.ndarray:
    """Points offset half a track width from the centerline, left unless ``label`` is the right side"""
    stations = np.atleast_1d(np.asarray(stations, dtype=float))
    points = np.array([truth.point_at(s) for s in stations])
    ahead = np.array([truth.point_at(s + 0.5) for s in stations])
    tangent = ahead - points
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    side = -1.0 if label == RIGHT_LABEL else 1.0
    return points + side * truth.track_width / 2 * normal


def _even_stations(truth: TrackGroundTruth, count: int) -> np.ndarray:
    return np.arange(count) * truth.lap_length / count


def synthetic_pathspace_belief(config: ExperimentConfig, truth: TrackGroundTruth, size: int) -> JointBelief:
    """Closed boundary spline with ``size`` control points, simplified once its budget engages"""
    params = config.pathspace
    label = params.labels[0]
    n_samples = params.samples_per_control * size
    samples = boundary_points(truth, label, _even_stations(truth, n_samples))
    knots = periodic_knots(np.linspace(0.0, 1.0, size + 1), params.order)
    spline = fit_spline(np.arange(n_samples) / n_samples, samples, knots, params.order, closed=True).spline
    covariance = np.eye(3 + 2 * size) * 1e-2
    covariance[:3, :3] = np.eye(3) * 1e-4
    belief = JointBelief(truth.start_pose(), covariance, splines={label: spline}, frame=1)
    budget = simplification_budget(spline, params.control_spacing)
    if budget < size:
        belief = simplify(belief, label, budget, params.baseline_weight, params.samples_per_control)
    return belief


def synthetic_landmark_map(config: ExperimentConfig, truth: TrackGroundTruth, size: int) -> LandmarkMap:
    label = config.pathspace.labels[0]
    positions = boundary_points(truth, label, _even_stations(truth, size))
    covariance = np.eye(3 + 2 * size) * 1e-2
    covariance[:3, :3] = np.eye(3) * 1e-4
    return LandmarkMap(truth.start_pose(), positions, (label,) * size, covariance)


def synthetic_readings(
    truth: TrackGroundTruth, label: str, count: int, noise_std: float, rng: np.random.Generator
):
    """Pose on the centerline and ``count`` noisy boundary readings 3..10 m ahead of it"""
    station = float(rng.uniform(0.0, truth.lap_length))
    here, ahead = truth.point_at(station), truth.point_at(station + 0.5)
    pose = AgentPose(here[0], here[1], math.atan2(ahead[1] - here[1], ahead[0] - here[0]))
    offsets = np.linspace(3.0, 10.0, count) if count > 1 else np.array([5.0])
    boundary = boundary_points(truth, label, station + offsets)
    boundary += rng.standard_normal(boundary.shape) * noise_std
    covariance = max(noise_std, 1e-3) ** 2 * np.eye(2)
    return pose, [Detection(p, label, covariance) for p in pose.to_local(boundary)]


def run_scalability(
    config: ExperimentConfig,
    map_sizes: Sequence[int],
    readings_per_update: Sequence[int],
    repeats: int,
) -> List[ScalabilityCell]:
    """Mean wall-clock time of one update cycle per (backend, map size, readings) cell"""
    if repeats < 3:
        raise InvalidArgumentError(f"repeats must be >= 3, got {repeats}")
    truth = generate_track(config.track)
    rng = np.random.default_rng(config.seed)
    label = config.pathspace.labels[0]
    zero_odometry = np.zeros(3)
    zero_noise = np.zeros((3, 3))
    noise_std = config.sensor.position_noise_std
    cells: List[ScalabilityCell] = []

    for size in map_sizes:
        beliefs = {}
        if "pathspace" in config.backends():
            beliefs["pathspace"] = synthetic_pathspace_belief(config, truth, size)
        if "ckf" in config.backends():
            beliefs["ckf"] = synthetic_landmark_map(config, truth, size)
        for readings in readings_per_update:
            durations: Dict[str, List[float]] = {name: [] for name in beliefs}
            for _ in range(repeats):
                pose, detections = synthetic_readings(truth, label, readings, noise_std, rng)
                for name, state in beliefs.items():
                    positioned = _at_pose(state, pose)
                    started = time.perf_counter()
                    if name == "pathspace":
                        process_frame(positioned, detections, zero_odometry, config.pathspace, zero_noise)
                    else:
                        ckf_step(positioned, detections, zero_odometry, zero_noise, config.ckf)
                    durations[name].append(time.perf_counter() - started)
            for name, values in durations.items():
                cells.append(ScalabilityCell(
                    backend=name, map_size=size, readings=readings, update_time=float(np.mean(values))
                ))
                logger.info("%s size=%d readings=%d: %.3f ms", name, size, readings, 1000 * np.mean(values))
    return cells


def _at_pose(state, pose: AgentPose):
    if isinstance(state, JointBelief):
        return JointBelief(pose, state.covariance, state.splines, frame=state.frame)
    return LandmarkMap(pose, state.positions, state.labels, state.covariance)


# ============ Emission ============
def metric_rows(metrics: Sequence[LapMetrics]) -> List[Dict[str, Union[int, float, str, None]]]:
    ordered = sorted(metrics, key=lambda m: (m.lap, m.backend))
    return [
        {
            "lap": m.lap,
            "backend": m.backend,
            "rmse_m": m.rmse,
            "size": m.map_size,
            "missed_pct": 100.0 * m.missed_fraction,
            "ghosts": m.ghost_count,
            "update_ms": 1000.0 * m.mean_update_time,
        }
        for m in ordered
    ]


def scalability_rows(cells: Sequence[ScalabilityCell]) -> List[Dict[str, Union[int, float, str]]]:
    ordered = sorted(cells, key=lambda c: (c.backend, c.map_size, c.readings))
    return [
        {"backend": c.backend, "map_size": c.map_size, "readings": c.readings, "update_ms": 1000.0 * c.update_time}
        for c in ordered
    ]


def _write_rows(rows: List[dict], columns: Sequence[str], fmt: OutputFormat, path: Union[str, Path]) -> Path:
    if not rows:
        raise EmitError("no results to write")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if OutputFormat(fmt) == OutputFormat.CSV:
            with path.open("w", newline="") as handle:
                writer = csv.DictWriter(handle, fieldnames=list(columns))
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        else:
            path.write_bytes(TypeAdapter(List[dict]).dump_json(rows, indent=2))
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc}") from exc
    logger.info("wrote %d rows to %s", len(rows), path)
    return path


def emit(metrics: Sequence[LapMetrics], fmt: OutputFormat, path: Union[str, Path]) -> Path:
    """Write per-lap metrics with columns lap,backend,rmse_m,size,missed_pct,ghosts,update_ms"""
    return _write_rows(metric_rows(metrics), METRIC_COLUMNS, fmt, path)


def emit_scalability(cells: Sequence[ScalabilityCell], fmt: OutputFormat, path: Union[str, Path]) -> Path:
    return _write_rows(scalability_rows(cells), SCALABILITY_COLUMNS, fmt, path)


# ============ Configuration ============
def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfigurationError(f"cannot read config {path}: {exc}") from exc
    except ValidationError as exc:
        raise InvalidConfigurationError(f"invalid config {path}: {exc}") from exc


def apply_overrides(config: ExperimentConfig, settings: Settings, seed: Optional[int] = None) -> ExperimentConfig:
    """Command-line seed wins over PATHSPACE_SEED, which wins over the file"""
    chosen = seed if seed is not None else settings.seed
    if chosen is None:
        return config
    return config.model_copy(update={"seed": chosen})
