"""
Gaussian beliefs and third-degree spherical cubature.

A belief of dimension d is propagated through a map with 2d equally
weighted points mean +/- sqrt(d) * column_i(sqrt(P)).
"""
import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy import linalg

from app.errors import InvalidConfigurationError, NumericError, PropagationError
from app.spline_core import BasisRow, BSpline, spline_basis

logger = logging.getLogger(__name__)

JITTER_START = 1e-12
JITTER_MAX = 1e-6


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mean.ndim != 1 or covariance.shape != (len(mean), len(mean)):
            raise InvalidConfigurationError(
                f"mean shape {mean.shape} does not match covariance shape {covariance.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)

    @property
    def dimension(self) -> int:
        return len(self.mean)


@dataclass(frozen=True, eq=False)
class SigmaPointSet:
    points: np.ndarray  # (2d, d)
    weights: np.ndarray  # (2d,)


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def is_psd(matrix: np.ndarray, rel_tol: float = 1e-9) -> bool:
    eigenvalues = linalg.eigvalsh(symmetrize(np.asarray(matrix, dtype=float)))
    scale = max(float(eigenvalues.max()), 0.0)
    return bool(eigenvalues.min() >= -rel_tol * scale - 1e-15)


def matrix_sqrt(covariance: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retried with growing diagonal jitter"""
    covariance = symmetrize(np.asarray(covariance, dtype=float))
    if not np.any(covariance):
        return np.zeros_like(covariance)
    try:
        return linalg.cholesky(covariance, lower=True)
    except linalg.LinAlgError:
        pass
    identity = np.eye(len(covariance))
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            factor = linalg.cholesky(covariance + jitter * identity, lower=True)
            logger.debug("cholesky needed jitter %.0e", jitter)
            return factor
        except linalg.LinAlgError:
            jitter *= 10
    raise NumericError(f"covariance not positive definite even with jitter {JITTER_MAX:g}")


def point_covariance(block_covariance: np.ndarray, row: BasisRow) -> np.ndarray:
    """Covariance of one spline point from the diagonal 2x2 control-point blocks.

    ``block_covariance`` is the 2n x 2n covariance of one spline's control points,
    interleaved (x0, y0, x1, y1, ...). Cross-point terms are ignored.
    """
    block_covariance = np.asarray(block_covariance, dtype=float)
    n = block_covariance.shape[0] // 2
    indices = row.indices
    if np.any(indices < 0) or np.any(indices >= n):
        raise InvalidConfigurationError(f"basis row references control points outside 0..{n - 1}")
    result = np.zeros((2, 2))
    for i, weight in zip(indices, row.weights):
        result += weight ** 2 * block_covariance[2 * i:2 * i + 2, 2 * i:2 * i + 2]
    return result


def spline_point_covariance(spline: BSpline, block_covariance: np.ndarray, u: float) -> np.ndarray:
    return point_covariance(block_covariance, spline_basis(spline, u))


def cubature_points(belief: GaussianBelief) -> SigmaPointSet:
    d = belief.dimension
    root = np.sqrt(d) * matrix_sqrt(belief.covariance)
    points = np.vstack([belief.mean + root.T, belief.mean - root.T])
    return SigmaPointSet(points, np.full(2 * d, 1.0 / (2 * d)))


def moments(sigma_points: SigmaPointSet) -> GaussianBelief:
    weights = sigma_points.weights
    mean = weights @ sigma_points.points
    centred = sigma_points.points - mean
    return GaussianBelief(mean, symmetrize((centred * weights[:, None]).T @ centred))


def cubature_transform(
    belief: GaussianBelief,
    fn: Callable[[np.ndarray], np.ndarray],
    vectorized: bool = False,
) -> Tuple[GaussianBelief, np.ndarray]:
    """Push the belief through fn; returns the output belief and the input/output cross covariance.

    With ``vectorized`` fn receives all points as a (2d, d) array and returns (2d, m).
    """
    sigma = cubature_points(belief)
    if vectorized:
        try:
            outputs = np.atleast_2d(np.asarray(fn(sigma.points), dtype=float))
        except PropagationError:
            raise
        except Exception as exc:
            raise PropagationError(f"map failed on cubature points: {exc}", -1) from exc
    else:
        rows = []
        for index, point in enumerate(sigma.points):
            try:
                rows.append(np.atleast_1d(np.asarray(fn(point), dtype=float)))
            except Exception as exc:
                raise PropagationError(f"map failed on cubature point {index}: {exc}", index) from exc
        outputs = np.vstack(rows)
    if not np.all(np.isfinite(outputs)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(outputs), axis=1))[0])
        raise PropagationError(f"map returned a non-finite value on cubature point {bad}", bad)

    output = moments(SigmaPointSet(outputs, sigma.weights))
    weights = sigma.weights
    cross = ((sigma.points - belief.mean) * weights[:, None]).T @ (outputs - output.mean)
    return output, cross


def cubature_propagate(
    belief: GaussianBelief,
    fn: Callable[[np.ndarray], np.ndarray],
    vectorized: bool = False,
) -> GaussianBelief:
    return cubature_transform(belief, fn, vectorized)[0]
