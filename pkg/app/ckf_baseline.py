"""
Landmark-based comparison backend: cubature Kalman filter over the pose and
every cone position, with Hungarian association under Mahalanobis cost.

State layout: [x, y, heading | l0x, l0y, l1x, l1y, ...]. The map never prunes
or merges landmarks.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from app.errors import InvalidArgumentError, InvalidConfigurationError, NumericError
from app.pathspace import (
    POSE_DIM,
    AgentPose,
    Detection,
    augment_with_points,
    compose,
    floor_covariance,
    insert_block,
    lower_triangle_to_matrix,
    propagate_pose_covariance,
    reading_in_world,
)
from app.schemas import CKFParams, LandmarkMapSnapshot, LandmarkSnapshot, PoseSchema
from app.uncertainty import GaussianBelief, cubature_transform, symmetrize

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LandmarkMap:
    pose: AgentPose
    positions: np.ndarray  # (L, 2) world, m
    labels: Tuple[str, ...]
    covariance: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        covariance = np.asarray(self.covariance, dtype=float)
        expected = POSE_DIM + 2 * len(positions)
        if len(self.labels) != len(positions):
            raise InvalidConfigurationError("one label per landmark required")
        if covariance.shape != (expected, expected):
            raise InvalidConfigurationError(
                f"covariance shape {covariance.shape} does not match state dimension {expected}"
            )
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "covariance", covariance)

    @classmethod
    def initial(cls, pose: AgentPose, pose_covariance) -> "LandmarkMap":
        return cls(pose, np.empty((0, 2)), (), np.array(pose_covariance, dtype=float))

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def dimension(self) -> int:
        return self.covariance.shape[0]

    def mean_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.as_vector(), self.positions.ravel()])

    def with_mean(self, mean: np.ndarray, covariance: np.ndarray) -> "LandmarkMap":
        return replace(
            self,
            pose=AgentPose(mean[0], mean[1], mean[2]),
            positions=mean[POSE_DIM:].reshape(-1, 2),
            covariance=symmetrize(covariance),
        )

    def landmark_covariances(self) -> np.ndarray:
        """(L, 2, 2) marginal covariances"""
        idx = POSE_DIM + 2 * np.arange(self.size)
        out = np.empty((self.size, 2, 2))
        out[:, 0, 0] = self.covariance[idx, idx]
        out[:, 0, 1] = self.covariance[idx, idx + 1]
        out[:, 1, 0] = self.covariance[idx + 1, idx]
        out[:, 1, 1] = self.covariance[idx + 1, idx + 1]
        return out


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]  # (map index, detection index)
    unmatched_detections: Tuple[int, ...]


def predict(landmark_map: LandmarkMap, odometry, odo_noise) -> LandmarkMap:
    covariance = propagate_pose_covariance(landmark_map.covariance, landmark_map.pose, odometry, odo_noise)
    return replace(landmark_map, pose=compose(landmark_map.pose, odometry), covariance=covariance)


def mahalanobis_cost(landmark_map: LandmarkMap, detections: Sequence[Detection]) -> np.ndarray:
    """(L, m) costs against world-frame detections; cross-label pairs cost +inf"""
    costs = np.full((landmark_map.size, len(detections)), np.inf)
    if costs.size == 0:
        return costs
    det_positions = np.array([d.position for d in detections])
    det_covs = np.array([d.covariance for d in detections])
    same_label = np.array(landmark_map.labels)[:, None] == np.array([d.label for d in detections])[None, :]

    diff = landmark_map.positions[:, None, :] - det_positions[None, :, :]
    s = landmark_map.landmark_covariances()[:, None] + det_covs[None, :]
    det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
    if np.any(det[same_label] <= 0):
        raise NumericError("innovation covariance is singular for a same-label pair")
    dx, dy = diff[..., 0], diff[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = (s[..., 1, 1] * dx * dx - (s[..., 0, 1] + s[..., 1, 0]) * dx * dy + s[..., 0, 0] * dy * dy) / det
    costs[same_label] = np.sqrt(np.maximum(quad[same_label], 0.0))
    return costs


def associate(costs, gate: float) -> Assignment:
    """Minimum-total-cost matching, then drop pairs above the gate"""
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    n_detections = costs.shape[1]
    if costs.shape[0] == 0 or n_detections == 0:
        return Assignment((), tuple(range(n_detections)))
    finite = np.isfinite(costs)
    ceiling = (np.abs(costs[finite]).sum() if finite.any() else 0.0) + 1.0
    big = ceiling * (min(costs.shape) + 1)
    rows, cols = linear_sum_assignment(np.where(finite, costs, big))
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c] and costs[r, c] <= gate)
    matched = {c for _, c in pairs}
    return Assignment(pairs, tuple(j for j in range(n_detections) if j not in matched))


def _observe(states: np.ndarray, landmark_indices: np.ndarray) -> np.ndarray:
    """Agent-frame positions of the given landmarks for each row of ``states``"""
    poses = states[:, :POSE_DIM]
    cols = POSE_DIM + 2 * landmark_indices
    dx = states[:, cols] - poses[:, [0]]
    dy = states[:, cols + 1] - poses[:, [1]]
    c, s = np.cos(poses[:, [2]]), np.sin(poses[:, [2]])
    local = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=2)
    return local.reshape(len(states), -1)


def ckf_update(
    landmark_map: LandmarkMap,
    assignment: Assignment,
    detections: Sequence[Detection],
    min_variance: float = 0.0,
) -> LandmarkMap:
    """Cubature update for matched pairs, then append unmatched detections as landmarks.

    ``detections`` are in the agent frame of ``landmark_map.pose``.
    """
    for i, j in assignment.pairs:
        if not (0 <= i < landmark_map.size and 0 <= j < len(detections)):
            raise InvalidArgumentError(f"assignment pair ({i}, {j}) out of range")

    if assignment.pairs:
        landmark_indices = np.array([i for i, _ in assignment.pairs])
        observed = np.concatenate([detections[j].position for _, j in assignment.pairs])
        noise = linalg.block_diag(*[
            floor_covariance(detections[j].covariance, min_variance) if min_variance > 0 else detections[j].covariance
            for _, j in assignment.pairs
        ])
        prior = GaussianBelief(landmark_map.mean_vector(), landmark_map.covariance)
        predicted, cross = cubature_transform(prior, lambda x: _observe(x, landmark_indices), vectorized=True)
        innovation_cov = symmetrize(predicted.covariance + noise)
        try:
            factor = linalg.cho_factor(innovation_cov)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericError("innovation covariance is not invertible") from exc
        gain = linalg.cho_solve(factor, cross.T).T
        mean = prior.mean + gain @ (observed - predicted.mean)
        covariance = prior.covariance - gain @ innovation_cov @ gain.T
        landmark_map = landmark_map.with_mean(mean, covariance)

    if assignment.unmatched_detections:
        readings = [reading_in_world(landmark_map.pose, detections[j], min_variance) for j in assignment.unmatched_detections]
        points = np.array([r.point for r in readings])
        cross, block = augment_with_points(
            landmark_map.covariance, landmark_map.pose, points, [r.covariance for r in readings]
        )
        covariance = insert_block(landmark_map.covariance, cross, block, landmark_map.dimension)
        labels = landmark_map.labels + tuple(detections[j].label for j in assignment.unmatched_detections)
        landmark_map = LandmarkMap(
            landmark_map.pose,
            np.vstack([landmark_map.positions, points]),
            labels,
            symmetrize(covariance),
        )
    return landmark_map


def step(landmark_map: LandmarkMap, detections: Sequence[Detection], odometry, odo_noise, params: CKFParams) -> LandmarkMap:
    landmark_map = predict(landmark_map, odometry, odo_noise)
    if not detections:
        return landmark_map
    world = []
    for detection in detections:
        reading = reading_in_world(landmark_map.pose, detection, params.min_measurement_variance)
        world.append(Detection(reading.point, detection.label, reading.covariance))
    assignment = associate(mahalanobis_cost(landmark_map, world), params.gate)
    return ckf_update(landmark_map, assignment, detections, params.min_measurement_variance)


class CKFMapper:
    name = "ckf"

    def __init__(self, params: CKFParams, initial_pose: AgentPose, pose_covariance, odo_noise):
        self.params = params
        self.odo_noise = np.asarray(odo_noise, dtype=float)
        self.landmark_map = LandmarkMap.initial(initial_pose, pose_covariance)

    def step(self, detections: Sequence[Detection], odometry) -> LandmarkMap:
        self.landmark_map = step(self.landmark_map, detections, odometry, self.odo_noise, self.params)
        return self.landmark_map

    @property
    def map_size(self) -> int:
        return self.landmark_map.size

    @property
    def map_representation(self) -> LandmarkMap:
        return self.landmark_map

    def snapshot(self) -> LandmarkMapSnapshot:
        return map_to_snapshot(self.landmark_map)


def map_to_snapshot(landmark_map: LandmarkMap) -> LandmarkMapSnapshot:
    pose = landmark_map.pose
    landmarks: List[LandmarkSnapshot] = [
        LandmarkSnapshot(label=label, position=tuple(position))
        for label, position in zip(landmark_map.labels, landmark_map.positions.tolist())
    ]
    return LandmarkMapSnapshot(
        pose=PoseSchema(x=pose.x, y=pose.y, heading=pose.heading),
        landmarks=landmarks,
        dimension=landmark_map.dimension,
        covariance_lower=landmark_map.covariance[np.tril_indices(landmark_map.dimension)].tolist(),
    )


def map_from_snapshot(snapshot: LandmarkMapSnapshot) -> LandmarkMap:
    return LandmarkMap(
        AgentPose(snapshot.pose.x, snapshot.pose.y, snapshot.pose.heading),
        np.array([lm.position for lm in snapshot.landmarks], dtype=float).reshape(-1, 2),
        tuple(lm.label for lm in snapshot.landmarks),
        lower_triangle_to_matrix(snapshot.covariance_lower, snapshot.dimension),
    )
