"""
PathSpace online mapping backend.

The joint belief stacks the agent pose and the control points of every
boundary spline into one Gaussian:

    [x, y, heading | spline_a (x0, y0, x1, y1, ...) | spline_b ... ]

Splines keep their block order for the life of the belief (insertion order
of ``JointBelief.splines``). All operations return new beliefs.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from app.errors import (
    ClosureRejectedError,
    FrameProcessingError,
    InvalidArgumentError,
    InvalidConfigurationError,
    InvalidStateError,
    NumericError,
    PathSpaceError,
)
from app.schemas import BeliefSnapshot, PathSpaceParams, PoseSchema, SplineSnapshot
from app.spline_core import (
    BSpline,
    Fit,
    arc_length,
    basis_matrix,
    checked_closure,
    clamped_knots,
    curvature_profile,
    evaluate,
    extend_to_point,
    fit_spline,
    make_clamped_uniform_knots,
    periodic_knots,
    project_many,
    spline_basis,
)
from app.uncertainty import GaussianBelief, cubature_propagate, symmetrize

logger = logging.getLogger(__name__)

POSE_DIM = 3
RANK_TOLERANCE = 1e-9


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]"""
    wrapped = math.remainder(float(angle), 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def floor_covariance(covariance: np.ndarray, min_variance: float) -> np.ndarray:
    """Raise the smallest eigenvalue of a 2x2 covariance to min_variance"""
    covariance = symmetrize(np.asarray(covariance, dtype=float))
    smallest = float(np.linalg.eigvalsh(covariance)[0])
    if smallest < min_variance:
        covariance = covariance + (min_variance - smallest) * np.eye(len(covariance))
    return covariance


# ============ Domain Types ============
@dataclass(frozen=True)
class AgentPose:
    x: float  # m
    y: float  # m
    heading: float  # rad

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    def to_world(self, local) -> np.ndarray:
        return np.asarray(local, dtype=float) @ rotation(self.heading).T + self.position

    def to_local(self, world) -> np.ndarray:
        return (np.asarray(world, dtype=float) - self.position) @ rotation(self.heading)


@dataclass(frozen=True, eq=False)
class Detection:
    position: np.ndarray  # agent frame, m
    label: str
    covariance: np.ndarray  # m^2

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float)
        covariance = np.asarray(self.covariance, dtype=float)
        if position.shape != (2,) or covariance.shape != (2, 2):
            raise InvalidConfigurationError("detection needs a 2D position and a 2x2 covariance")
        if not np.allclose(covariance, covariance.T, atol=1e-12):
            raise InvalidConfigurationError("detection covariance must be symmetric")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "covariance", covariance)


@dataclass(frozen=True, eq=False)
class PendingBoundary:
    """World points buffered for a label that has no spline yet"""
    points: np.ndarray  # (m, 2)
    covariances: np.ndarray  # (m, 2, 2)
    counts: np.ndarray  # (m,)
    anchor: np.ndarray  # pose position when the first point arrived


@dataclass(frozen=True, eq=False)
class JointBelief:
    pose: AgentPose
    covariance: np.ndarray
    splines: Mapping[str, BSpline] = field(default_factory=dict)
    pending: Mapping[str, PendingBoundary] = field(default_factory=dict)
    last_update_u: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)
    frame: int = 0

    def __post_init__(self):
        covariance = np.asarray(self.covariance, dtype=float)
        expected = POSE_DIM + 2 * sum(s.n_control for s in self.splines.values())
        if covariance.shape != (expected, expected):
            raise InvalidConfigurationError(
                f"covariance shape {covariance.shape} does not match state dimension {expected}"
            )
        object.__setattr__(self, "covariance", covariance)

    @classmethod
    def initial(cls, pose: AgentPose, pose_covariance: np.ndarray) -> "JointBelief":
        return cls(pose=pose, covariance=np.array(pose_covariance, dtype=float))

    @property
    def dimension(self) -> int:
        return self.covariance.shape[0]

    @property
    def control_count(self) -> int:
        return sum(s.n_control for s in self.splines.values())

    def offsets(self) -> Dict[str, int]:
        offsets, offset = {}, POSE_DIM
        for label, spline in self.splines.items():
            offsets[label] = offset
            offset += 2 * spline.n_control
        return offsets

    def block(self, label: str) -> slice:
        if label not in self.splines:
            raise InvalidArgumentError(f"no spline for boundary '{label}'")
        start = self.offsets()[label]
        return slice(start, start + 2 * self.splines[label].n_control)

    def mean_vector(self) -> np.ndarray:
        parts = [self.pose.as_vector()] + [s.control_points.ravel() for s in self.splines.values()]
        return np.concatenate(parts)

    def with_mean(self, mean: np.ndarray, covariance: np.ndarray) -> "JointBelief":
        """Same structure, new mean and covariance"""
        splines, offset = {}, POSE_DIM
        for label, spline in self.splines.items():
            size = 2 * spline.n_control
            splines[label] = spline.with_control_points(mean[offset:offset + size].reshape(-1, 2))
            offset += size
        return replace(
            self,
            pose=AgentPose(mean[0], mean[1], mean[2]),
            splines=splines,
            covariance=symmetrize(covariance),
        )


class SplineMeasurement(NamedTuple):
    control_values: np.ndarray  # (2a,) interleaved x, y
    covariance: np.ndarray  # (2a, 2a)
    affected_indices: np.ndarray  # (a,) control-point indices
    label: str
    projections: np.ndarray  # u of each update point on the mean spline


@dataclass(frozen=True)
class ClassifierParams:
    growth_threshold: float = 2.0
    separation_threshold: float = 1.5
    endpoint_u_tolerance: float = 1e-3

    def __post_init__(self):
        if min(self.growth_threshold, self.separation_threshold, self.endpoint_u_tolerance) <= 0:
            raise InvalidConfigurationError("classifier thresholds must be positive")

    @classmethod
    def from_params(cls, params: PathSpaceParams) -> "ClassifierParams":
        return cls(params.growth_threshold, params.separation_threshold, params.endpoint_u_tolerance)


class WorldReading(NamedTuple):
    point: np.ndarray  # world, m
    covariance: np.ndarray  # world, m^2


@dataclass
class LabelClassification:
    update: List[WorldReading] = field(default_factory=list)
    expansion: List[WorldReading] = field(default_factory=list)
    pending: List[WorldReading] = field(default_factory=list)


@dataclass
class Classification:
    labels: Dict[str, LabelClassification] = field(default_factory=dict)
    rejected: List[Detection] = field(default_factory=list)


@dataclass
class FrameReport:
    frame: int
    dimension: int
    updated: List[str] = field(default_factory=list)
    extended: List[str] = field(default_factory=list)
    bootstrapped: List[str] = field(default_factory=list)
    closed: List[str] = field(default_factory=list)
    simplified: List[str] = field(default_factory=list)
    rejected: int = 0


class FrameOutcome(NamedTuple):
    belief: JointBelief
    report: FrameReport


# ============ Motion ============
def compose(pose: AgentPose, odometry) -> AgentPose:
    forward, lateral, turn = (float(v) for v in odometry)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    return AgentPose(pose.x + c * forward - s * lateral, pose.y + s * forward + c * lateral, pose.heading + turn)


def motion_jacobians(pose: AgentPose, odometry) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobians of compose() with respect to the pose and to the odometry"""
    forward, lateral, _ = (float(v) for v in odometry)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    jac_pose = np.array([
        [1.0, 0.0, -s * forward - c * lateral],
        [0.0, 1.0, c * forward - s * lateral],
        [0.0, 0.0, 1.0],
    ])
    jac_odometry = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return jac_pose, jac_odometry


def propagate_pose_covariance(covariance: np.ndarray, pose: AgentPose, odometry, odo_noise) -> np.ndarray:
    """Pose rows and columns through the motion Jacobian, map block untouched"""
    jac_pose, jac_odometry = motion_jacobians(pose, odometry)
    out = np.array(covariance, dtype=float)
    out[:POSE_DIM, :] = jac_pose @ out[:POSE_DIM, :]
    out[:, :POSE_DIM] = out[:, :POSE_DIM] @ jac_pose.T
    out[:POSE_DIM, :POSE_DIM] += jac_odometry @ np.asarray(odo_noise, dtype=float) @ jac_odometry.T
    return symmetrize(out)


def predict(belief: JointBelief, odometry, odo_noise) -> JointBelief:
    covariance = propagate_pose_covariance(belief.covariance, belief.pose, odometry, odo_noise)
    return replace(belief, pose=compose(belief.pose, odometry), covariance=covariance)


# ============ State augmentation ============
def augment_with_points(covariance: np.ndarray, pose: AgentPose, points, point_covariances):
    """First-order covariance of world points placed from the pose mean.

    Returns (cross, block): cross is (2m, D) against the current state,
    block is the (2m, 2m) covariance of the new points.
    """
    points = np.atleast_2d(points)
    jacobian = np.zeros((2 * len(points), POSE_DIM))
    for i, point in enumerate(points):
        jacobian[2 * i:2 * i + 2] = [
            [1.0, 0.0, -(point[1] - pose.y)],
            [0.0, 1.0, point[0] - pose.x],
        ]
    cross = jacobian @ covariance[:POSE_DIM, :]
    block = jacobian @ covariance[:POSE_DIM, :POSE_DIM] @ jacobian.T + linalg.block_diag(*point_covariances)
    return cross, symmetrize(block)


def insert_block(covariance: np.ndarray, cross: np.ndarray, block: np.ndarray, position: int) -> np.ndarray:
    """Insert rows/columns for new variables before index ``position``"""
    dim = covariance.shape[0]
    size = block.shape[0]
    out = np.empty((dim + size, dim + size))
    old = np.r_[0:position, position + size:dim + size]
    new = slice(position, position + size)
    out[np.ix_(old, old)] = covariance
    out[new, old] = cross
    out[old, new] = cross.T
    out[new, new] = block
    return out


def replace_block(belief: JointBelief, label: str, spline: BSpline, operator: np.ndarray, block: np.ndarray) -> JointBelief:
    """Swap one spline for a linear function of it; cross terms go through ``operator``"""
    sl = belief.block(label)
    covariance = belief.covariance
    keep = np.r_[0:sl.start, sl.stop:belief.dimension]
    reduced = covariance[np.ix_(keep, keep)]
    cross = operator @ covariance[sl, :][:, keep]
    splines = dict(belief.splines)
    splines[label] = spline
    covariance = insert_block(reduced, cross, block, sl.start)
    return replace(belief, splines=splines, covariance=symmetrize(covariance))


# ============ Classification ============
def reading_in_world(pose: AgentPose, detection: Detection, min_variance: float = 0.0) -> WorldReading:
    rot = rotation(pose.heading)
    covariance = rot @ detection.covariance @ rot.T
    if min_variance > 0:
        covariance = floor_covariance(covariance, min_variance)
    return WorldReading(pose.to_world(detection.position), covariance)


def classify_detections(
    belief: JointBelief,
    detections: Sequence[Detection],
    params: ClassifierParams,
    labels: Optional[Sequence[str]] = None,
    min_variance: float = 0.0,
) -> Classification:
    """Split readings into update and expansion sets per boundary label.

    Readings of a label without a spline are returned as ``pending``; readings
    of labels outside ``labels`` are rejected.
    """
    known = set(labels) if labels is not None else set(belief.splines) | set(belief.pending)
    result = Classification()
    grouped: Dict[str, List[WorldReading]] = {}
    for detection in detections:
        if detection.label not in known:
            result.rejected.append(detection)
            continue
        grouped.setdefault(detection.label, []).append(reading_in_world(belief.pose, detection, min_variance))

    for label, readings in grouped.items():
        out = result.labels.setdefault(label, LabelClassification())
        spline = belief.splines.get(label)
        if spline is None:
            out.pending.extend(readings)
            continue
        if spline.closed:
            out.update.extend(readings)
            continue
        lo, hi = spline.domain
        end = evaluate(spline, hi)
        last_control = spline.control_points[-1]
        projections = project_many(spline, np.array([r.point for r in readings]))
        for reading, projection in zip(readings, projections):
            at_end = (hi - projection.u) <= params.endpoint_u_tolerance * (hi - lo)
            grows = np.linalg.norm(reading.point - end) > params.growth_threshold
            separated = np.linalg.norm(reading.point - last_control) > params.separation_threshold
            if at_end and grows and separated:
                out.expansion.append(reading)
            else:
                out.update.append(reading)
    if result.rejected:
        logger.debug("rejected %d detections with unknown labels", len(result.rejected))
    return result


def order_expansion_chain(points, endpoint) -> List[int]:
    """Greedy nearest-neighbour chain from endpoint; the last index is the extension point"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise InvalidArgumentError("expansion set is empty")
    remaining = list(range(len(points)))
    current = np.asarray(endpoint, dtype=float)
    chain = []
    while remaining:
        distances = np.linalg.norm(points[remaining] - current, axis=1)
        nearest = remaining.pop(int(np.argmin(distances)))
        chain.append(nearest)
        current = points[nearest]
    return chain


# ============ Expansion ============
def extend_belief(belief: JointBelief, label: str, extension_point, sensor_cov_world) -> JointBelief:
    spline = belief.splines.get(label)
    if spline is None:
        raise InvalidArgumentError(f"no spline for boundary '{label}'")
    if spline.closed:
        raise InvalidStateError(f"boundary '{label}' is closed and cannot be extended")
    extension = extend_to_point(spline, extension_point)
    if not extension.extended:
        return belief
    sl = belief.block(label)
    unclamp = np.kron(extension.operator, np.eye(2))
    covariance = np.array(belief.covariance)
    covariance[sl, :] = unclamp @ covariance[sl, :]
    covariance[:, sl] = covariance[:, sl] @ unclamp.T
    cross, block = augment_with_points(covariance, belief.pose, [extension_point], [sensor_cov_world])
    covariance = insert_block(covariance, cross, block, sl.stop)
    splines = dict(belief.splines)
    splines[label] = extension.spline
    return replace(belief, splines=splines, covariance=symmetrize(covariance))


# ============ Measurement fit ============
def _circular_cover(indices: np.ndarray, period: int) -> np.ndarray:
    """Shortest run of consecutive indices (mod period) covering ``indices``"""
    idx = np.unique(indices)
    if len(idx) == period:
        return np.arange(period)
    gaps = np.diff(np.append(idx, idx[0] + period))
    widest = int(np.argmax(gaps))
    start = idx[(widest + 1) % len(idx)]
    return (start + np.arange(period - gaps[widest] + 1)) % period


def fit_measurement_spline(belief: JointBelief, label: str, update_points, sensor_covs, lam: float) -> SplineMeasurement:
    """Regularised least-squares control points for the readings, with cubature covariance.

    C = (B'B + L)^-1 (B'y + L C_mu), L = lam * diag(1 - B'1/m), over the affected
    control points only. Projections are frozen from the mean pass.
    """
    spline = belief.splines.get(label)
    if spline is None:
        raise InvalidArgumentError(f"no spline for boundary '{label}'")
    points = np.atleast_2d(np.asarray(update_points, dtype=float))
    if points.size == 0:
        raise InvalidArgumentError("update set is empty")
    if lam <= 0:
        raise InvalidConfigurationError(f"regularization must be positive, got {lam}")

    projections = np.array([p.u for p in project_many(spline, points)])
    rows = [spline_basis(spline, u) for u in projections]
    touched = np.concatenate([row.indices for row in rows])
    if spline.closed:
        affected = _circular_cover(touched, spline.n_control)
    else:
        affected = np.arange(touched.min(), touched.max() + 1)
    column = {int(index): col for col, index in enumerate(affected)}

    basis_rows = np.zeros((len(points), len(affected)))
    for r, row in enumerate(rows):
        for index, weight in zip(row.indices, row.weights):
            basis_rows[r, column[int(index)]] += weight

    prior = spline.control_points[affected]
    penalty = lam * np.diag(1.0 - basis_rows.sum(axis=0) / len(points))
    try:
        factor = linalg.cho_factor(basis_rows.T @ basis_rows + penalty)
    except linalg.LinAlgError as exc:
        raise NumericError(f"normal matrix of boundary '{label}' is singular") from exc
    prior_term = penalty @ prior

    def fit(samples: np.ndarray) -> np.ndarray:
        # samples: (s, 2m) stacked readings -> (s, 2a) interleaved control values
        stacked = samples.reshape(len(samples), len(points), 2)
        rhs = np.einsum("ma,smc->sac", basis_rows, stacked) + prior_term[None]
        solved = np.stack([linalg.cho_solve(factor, r) for r in rhs])
        return solved.reshape(len(samples), -1)

    readings = GaussianBelief(points.ravel(), linalg.block_diag(*sensor_covs))
    mean = fit(points.ravel()[None])[0]
    spread = cubature_propagate(readings, fit, vectorized=True)
    return SplineMeasurement(mean, symmetrize(spread.covariance), affected, label, projections)


# ============ Update ============
def observed_subspace(measurement_cov: np.ndarray, rel_tol: float = RANK_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvectors and eigenvalues spanning the range of a measurement covariance"""
    eigenvalues, eigenvectors = linalg.eigh(symmetrize(np.asarray(measurement_cov, dtype=float)))
    if eigenvalues.size == 0 or eigenvalues.max() <= 0.0:
        return eigenvectors[:, :0], eigenvalues[:0]
    kept = eigenvalues > rel_tol * eigenvalues.max()
    return eigenvectors[:, kept], eigenvalues[kept]


def kalman_update(belief: JointBelief, measurement: SplineMeasurement) -> JointBelief:
    """Direct observation of the affected control coordinates, Joseph-form covariance.

    Only the range of the measurement covariance is observed; directions in its
    null space carry no information from the readings and are left untouched.
    """
    spline = belief.splines.get(measurement.label)
    if spline is None:
        raise InvalidArgumentError(f"no spline for boundary '{measurement.label}'")
    affected = np.asarray(measurement.affected_indices, dtype=int)
    if np.any(affected < 0) or np.any(affected >= spline.n_control):
        raise InvalidArgumentError("measurement references control points outside the spline")
    offset = belief.block(measurement.label).start
    idx = (offset + 2 * affected[:, None] + np.arange(2)[None, :]).ravel()

    basis, variances = observed_subspace(measurement.covariance)
    if variances.size == 0:
        logger.debug("measurement of boundary '%s' has no observable directions", measurement.label)
        return belief

    mean = belief.mean_vector()
    covariance = belief.covariance
    innovation = basis.T @ (measurement.control_values - mean[idx])
    p_h = covariance[:, idx] @ basis
    innovation_cov = symmetrize(basis.T @ covariance[np.ix_(idx, idx)] @ basis + np.diag(variances))
    try:
        factor = linalg.cho_factor(innovation_cov)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError("innovation covariance is not invertible") from exc
    gain = linalg.cho_solve(factor, p_h.T).T

    k_h_p = gain @ p_h.T
    updated = covariance - k_h_p - k_h_p.T + gain @ innovation_cov @ gain.T
    return belief.with_mean(mean + gain @ innovation, updated)


# ============ Simplification ============
def simplification_budget(spline: BSpline, control_spacing: float) -> int:
    budget = int(round(arc_length(spline) / control_spacing))
    return min(max(budget, spline.order + 1), spline.n_control)


def chord_parameters(samples: np.ndarray, lo: float, hi: float, closed: bool) -> np.ndarray:
    """Normalised cumulative chord length of ``samples`` mapped onto [lo, hi]"""
    steps = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    chord = np.concatenate([[0.0], np.cumsum(steps)])
    total = chord[-1] + (np.linalg.norm(samples[0] - samples[-1]) if closed else 0.0)
    if total <= 1e-9:
        return np.linspace(lo, hi, len(samples), endpoint=not closed)
    return lo + (hi - lo) * chord / total


def curvature_weighted_refit(spline: BSpline, budget: int, baseline_weight: float, samples_per_control: int = 20) -> Tuple[Fit, np.ndarray]:
    """Refit with ``budget`` control points, knots at quantiles of curvature mixed with a uniform baseline.

    The reduced spline is parameterised by chord length; keeping the budget
    reuses the old knots and parameters. Returns the fit and the (budget x n)
    operator mapping old control points to new ones.
    """
    lo, hi = spline.domain
    n_samples = samples_per_control * spline.n_control
    us = np.linspace(lo, hi, n_samples, endpoint=not spline.closed)
    old_rows = basis_matrix(spline, us)
    samples = old_rows @ spline.control_points

    if budget == spline.n_control:
        fit = fit_spline(us, samples, spline.knots, spline.order, closed=spline.closed)
        return fit, fit.operator @ old_rows

    ts = chord_parameters(samples, lo, hi, spline.closed)
    kappa = curvature_profile(spline, us)
    if spline.closed:
        ts, kappa = np.append(ts, hi), np.append(kappa, kappa[0])
    spans = np.diff(ts)
    total = float(np.sum(0.5 * (kappa[1:] + kappa[:-1]) * spans))
    kappa_hat = kappa / total if total > 1e-9 else np.full(len(ts), 1.0 / (hi - lo))
    density = (1.0 - baseline_weight) * kappa_hat + baseline_weight / (hi - lo)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * spans)])
    cumulative /= cumulative[-1]

    if spline.closed:
        cuts = np.interp(np.arange(budget + 1) / budget, cumulative, ts)
        cuts[0], cuts[-1] = lo, hi
        knots = periodic_knots(cuts, spline.order)
        ts = ts[:-1]
    else:
        n_interior = budget - spline.order
        interior = np.interp(np.arange(1, n_interior + 1) / (n_interior + 1), cumulative, ts)
        knots = clamped_knots(interior, spline.order, lo, hi)
    fit = fit_spline(ts, samples, knots, spline.order, closed=spline.closed)
    return fit, fit.operator @ old_rows


def simplify(belief: JointBelief, label: str, budget: int, baseline_weight: float, samples_per_control: int = 20) -> JointBelief:
    spline = belief.splines.get(label)
    if spline is None:
        raise InvalidArgumentError(f"no spline for boundary '{label}'")
    if budget < spline.order + 1:
        raise InvalidArgumentError(f"budget {budget} below minimum {spline.order + 1}")
    if not 0.0 <= baseline_weight <= 1.0:
        raise InvalidArgumentError(f"baseline weight {baseline_weight} outside [0, 1]")

    fit, operator = curvature_weighted_refit(spline, budget, baseline_weight, samples_per_control)
    sl = belief.block(label)
    old = GaussianBelief(spline.control_points.ravel(), belief.covariance[sl, sl])

    def refit(flat: np.ndarray) -> np.ndarray:
        controls = flat.reshape(len(flat), -1, 2)
        return np.einsum("ij,sjc->sic", operator, controls).reshape(len(flat), -1)

    block = cubature_propagate(old, refit, vectorized=True).covariance
    logger.info("simplified boundary '%s' from %d to %d control points", label, spline.n_control, budget)
    return replace_block(belief, label, fit.spline, np.kron(operator, np.eye(2)), block)


# ============ Loop closure ============
def check_loop_closure(
    belief: JointBelief,
    label: str,
    min_path_length: float,
    closure_radius: float,
    early_segment_fraction: float = 0.1,
) -> bool:
    spline = belief.splines.get(label)
    if spline is None or spline.closed:
        return False
    if arc_length(spline) <= min_path_length:
        return False
    lo, hi = spline.domain
    recent = np.asarray(belief.last_update_u.get(label, ()), dtype=float)
    if recent.size == 0 or not np.any((recent - lo) / (hi - lo) < early_segment_fraction):
        return False
    return bool(np.linalg.norm(evaluate(spline, hi) - evaluate(spline, lo)) <= closure_radius)


def close_belief_loop(belief: JointBelief, label: str, closure_distance: float, tolerance: float) -> JointBelief:
    spline = belief.splines.get(label)
    if spline is None:
        raise InvalidArgumentError(f"no spline for boundary '{label}'")
    closure = checked_closure(spline, closure_distance, tolerance)
    sl = belief.block(label)
    transform = np.kron(closure.operator, np.eye(2))
    block = transform @ belief.covariance[sl, sl] @ transform.T
    closed = replace_block(belief, label, closure.spline, transform, symmetrize(block))
    last_update = dict(closed.last_update_u)
    last_update.pop(label, None)
    logger.info("closed boundary '%s' (gap %.2f m, deviation %.3f m)", label, closure.gap, closure.deviation)
    return replace(closed, last_update_u=last_update)


# ============ Bootstrap ============
def _buffer_readings(belief: JointBelief, label: str, readings: Sequence[WorldReading], merge_radius: float) -> PendingBoundary:
    pending = belief.pending.get(label)
    if pending is None:
        pending = PendingBoundary(np.empty((0, 2)), np.empty((0, 2, 2)), np.empty(0), belief.pose.position)
    points = [p for p in pending.points]
    covariances = [c for c in pending.covariances]
    counts = list(pending.counts)
    for reading in readings:
        if points:
            distances = np.linalg.norm(np.array(points) - reading.point, axis=1)
            nearest = int(np.argmin(distances))
            if distances[nearest] < merge_radius:
                counts[nearest] += 1
                points[nearest] = points[nearest] + (reading.point - points[nearest]) / counts[nearest]
                covariances[nearest] = reading.covariance
                continue
        points.append(reading.point)
        covariances.append(reading.covariance)
        counts.append(1)
    return PendingBoundary(np.array(points), np.array(covariances), np.array(counts, dtype=float), pending.anchor)


def bootstrap_boundary(belief: JointBelief, label: str, readings: Sequence[WorldReading], order: int, merge_radius: float) -> JointBelief:
    """Buffer readings of an unmapped boundary; start a clamped spline once order+1 points exist"""
    pending = _buffer_readings(belief, label, readings, merge_radius)
    buffered = dict(belief.pending)
    if len(pending.points) < order + 1:
        buffered[label] = pending
        return replace(belief, pending=buffered)

    chain = order_expansion_chain(pending.points, pending.anchor)[:order + 1]
    points = pending.points[chain]
    cross, block = augment_with_points(belief.covariance, belief.pose, points, pending.covariances[chain])
    covariance = insert_block(belief.covariance, cross, block, belief.dimension)
    splines = dict(belief.splines)
    splines[label] = BSpline(order, make_clamped_uniform_knots(order + 1, order), points)
    buffered.pop(label, None)
    logger.info("started boundary '%s' from %d buffered points", label, order + 1)
    return replace(belief, splines=splines, pending=buffered, covariance=covariance)


# ============ Frame pipeline ============
def _process_label(belief: JointBelief, label: str, readings: LabelClassification, params: PathSpaceParams, report: FrameReport) -> JointBelief:
    if readings.pending:
        had_spline = label in belief.splines
        belief = bootstrap_boundary(belief, label, readings.pending, params.order, params.bootstrap_merge_radius)
        if not had_spline and label in belief.splines:
            report.bootstrapped.append(label)

    updates = list(readings.update)
    if readings.expansion:
        spline = belief.splines[label]
        expansion_points = np.array([r.point for r in readings.expansion])
        chain = order_expansion_chain(expansion_points, evaluate(spline, spline.domain[1]))
        extension = readings.expansion[chain[-1]]
        belief = extend_belief(belief, label, extension.point, extension.covariance)
        updates.extend(readings.expansion[i] for i in chain[:-1])
        report.extended.append(label)

    if updates:
        measurement = fit_measurement_spline(
            belief,
            label,
            [r.point for r in updates],
            [r.covariance for r in updates],
            params.regularization,
        )
        belief = kalman_update(belief, measurement)
        last_update = dict(belief.last_update_u)
        last_update[label] = tuple(float(u) for u in measurement.projections)
        belief = replace(belief, last_update_u=last_update)
        report.updated.append(label)
    return belief


def _maintain_label(belief: JointBelief, label: str, params: PathSpaceParams, report: FrameReport) -> JointBelief:
    spline = belief.splines.get(label)
    if spline is None or spline.closed:
        return belief
    closing = label in report.updated and check_loop_closure(
        belief, label, params.min_path_length, params.closure_radius, params.early_segment_fraction
    )
    if closing:
        try:
            belief = close_belief_loop(belief, label, params.closure_radius, params.closure_tolerance)
        except ClosureRejectedError as exc:
            logger.warning("loop closure of '%s' rejected: %s", label, exc.detail)
        else:
            report.closed.append(label)
            closed = belief.splines[label]
            budget = simplification_budget(closed, params.control_spacing)
            if budget < closed.n_control:
                belief = simplify(belief, label, budget, params.baseline_weight, params.samples_per_control)
                report.simplified.append(label)
            return belief

    if belief.frame > 0 and belief.frame % params.simplify_every == 0:
        budget = simplification_budget(spline, params.control_spacing)
        if budget < spline.n_control:
            belief = simplify(belief, label, budget, params.baseline_weight, params.samples_per_control)
            report.simplified.append(label)
    return belief


def process_frame(belief: JointBelief, detections: Sequence[Detection], odometry, params: PathSpaceParams, odo_noise) -> FrameOutcome:
    """predict -> classify -> extend -> fit -> update -> close/simplify, one update per label"""
    frame = belief.frame
    try:
        belief = predict(belief, odometry, odo_noise)
        classification = classify_detections(
            belief,
            detections,
            ClassifierParams.from_params(params),
            labels=params.labels,
            min_variance=params.min_measurement_variance,
        )
    except FrameProcessingError:
        raise
    except PathSpaceError as exc:
        raise FrameProcessingError(frame, exc) from exc

    report = FrameReport(frame=frame, dimension=belief.dimension, rejected=len(classification.rejected))
    for label in params.labels:
        try:
            readings = classification.labels.get(label)
            if readings is not None:
                belief = _process_label(belief, label, readings, params, report)
            belief = _maintain_label(belief, label, params, report)
        except PathSpaceError as exc:
            raise FrameProcessingError(frame, exc, label) from exc

    report.dimension = belief.dimension
    return FrameOutcome(replace(belief, frame=frame + 1), report)


class PathSpaceMapper:
    """Stateful wrapper owning one belief across a run"""

    name = "pathspace"

    def __init__(self, params: PathSpaceParams, initial_pose: AgentPose, pose_covariance, odo_noise):
        self.params = params
        self.odo_noise = np.asarray(odo_noise, dtype=float)
        self.belief = JointBelief.initial(initial_pose, pose_covariance)

    def step(self, detections: Sequence[Detection], odometry) -> FrameReport:
        outcome = process_frame(self.belief, detections, odometry, self.params, self.odo_noise)
        self.belief = outcome.belief
        return outcome.report

    @property
    def map_size(self) -> int:
        return self.belief.control_count

    @property
    def map_representation(self) -> JointBelief:
        return self.belief

    def snapshot(self) -> BeliefSnapshot:
        return belief_to_snapshot(self.belief)


# ============ Snapshots ============
def belief_to_snapshot(belief: JointBelief) -> BeliefSnapshot:
    offsets = belief.offsets()
    splines = [
        SplineSnapshot(
            label=label,
            order=spline.order,
            knots=spline.knots.tolist(),
            control_points=[tuple(p) for p in spline.control_points.tolist()],
            closed=spline.closed,
            offset=offsets[label],
        )
        for label, spline in belief.splines.items()
    ]
    lower = belief.covariance[np.tril_indices(belief.dimension)]
    return BeliefSnapshot(
        pose=PoseSchema(x=belief.pose.x, y=belief.pose.y, heading=belief.pose.heading),
        splines=splines,
        dimension=belief.dimension,
        covariance_lower=lower.tolist(),
    )


def lower_triangle_to_matrix(values: Sequence[float], dimension: int) -> np.ndarray:
    if len(values) != dimension * (dimension + 1) // 2:
        raise InvalidConfigurationError("covariance triangle does not match the snapshot dimension")
    matrix = np.zeros((dimension, dimension))
    matrix[np.tril_indices(dimension)] = values
    return matrix + np.tril(matrix, -1).T


def belief_from_snapshot(snapshot: BeliefSnapshot) -> JointBelief:
    splines = {}
    for entry in sorted(snapshot.splines, key=lambda s: s.offset):
        splines[entry.label] = BSpline(entry.order, entry.knots, entry.control_points, entry.closed)
    return JointBelief(
        pose=AgentPose(snapshot.pose.x, snapshot.pose.y, snapshot.pose.heading),
        covariance=lower_triangle_to_matrix(snapshot.covariance_lower, snapshot.dimension),
        splines=splines,
    )
