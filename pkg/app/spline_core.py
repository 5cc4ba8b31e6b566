"""
Deterministic B-spline geometry: basis rows, evaluation, derivatives,
curvature, projection, extension and loop closure.

Splines are planar and immutable. ``order`` is k (degree k-1). Open splines
are clamped with k equal knots at each end. Closed splines keep their n
independent control points in ``control_points``; evaluation uses the
periodic coefficient array (the first k-1 points appended again), so the
knot-vector length rule applies to ``coefficients``.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Tuple

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline as _ScipyBSpline

from app.errors import (
    ClosureRejectedError,
    DomainError,
    InvalidConfigurationError,
    InvalidStateError,
)

logger = logging.getLogger(__name__)

DOMAIN_EPS = 1e-12
COINCIDENT_EPS = 1e-9


def _readonly(values, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise InvalidConfigurationError(f"expected a {ndim}-d array, got shape {array.shape}")
    array.setflags(write=False)
    return array


def check_knot_vector(knots: np.ndarray, n_coefficients: int, order: int) -> None:
    """Raise unless knots are non-decreasing and sized n_coefficients + order"""
    if len(knots) != n_coefficients + order:
        raise InvalidConfigurationError(
            f"knot vector has {len(knots)} values, expected {n_coefficients + order}"
        )
    if np.any(np.diff(knots) < 0):
        raise InvalidConfigurationError("knot vector must be non-decreasing")


@dataclass(frozen=True)
class BasisRow:
    """Non-zero basis weights at one parameter value"""
    start_index: int
    weights: np.ndarray
    period: int = 0  # number of independent control points for closed splines

    @property
    def indices(self) -> np.ndarray:
        idx = self.start_index + np.arange(len(self.weights))
        return idx % self.period if self.period else idx


@dataclass(frozen=True, eq=False)
class BSpline:
    order: int
    knots: np.ndarray
    control_points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        if self.order < 2:
            raise InvalidConfigurationError(f"order must be >= 2, got {self.order}")
        object.__setattr__(self, "knots", _readonly(self.knots, 1))
        points = _readonly(self.control_points, 2)
        if points.shape[1] != 2:
            raise InvalidConfigurationError("control points must be 2D")
        object.__setattr__(self, "control_points", points)
        if len(points) < self.order:
            raise InvalidConfigurationError(
                f"a spline of order {self.order} needs at least {self.order} control points"
            )
        check_knot_vector(self.knots, len(self.coefficients), self.order)

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def n_control(self) -> int:
        return len(self.control_points)

    @property
    def coefficients(self) -> np.ndarray:
        if self.closed:
            return np.vstack([self.control_points, self.control_points[: self.degree]])
        return self.control_points

    @property
    def domain(self) -> Tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[-self.order])

    @property
    def clamped_left(self) -> bool:
        return not self.closed and bool(np.all(self.knots[: self.order] == self.knots[0]))

    @property
    def clamped_right(self) -> bool:
        return not self.closed and bool(np.all(self.knots[-self.order:] == self.knots[-1]))

    @cached_property
    def _curve(self) -> _ScipyBSpline:
        return _ScipyBSpline(self.knots, self.coefficients, self.degree)

    @cached_property
    def _first_derivative(self) -> _ScipyBSpline:
        return self._curve.derivative(1)

    @cached_property
    def _second_derivative(self) -> _ScipyBSpline:
        return self._curve.derivative(2)

    def with_control_points(self, control_points: np.ndarray) -> "BSpline":
        return BSpline(self.order, self.knots, control_points, self.closed)


class Curvature(NamedTuple):
    kappa: float  # 1/m
    degenerate: bool


class Projection(NamedTuple):
    u: float
    distance: float  # m


class Extension(NamedTuple):
    spline: BSpline
    new_index: int
    extended: bool
    operator: np.ndarray  # maps old control points onto the first n+1 new ones


class Closure(NamedTuple):
    spline: BSpline
    operator: np.ndarray  # closed control points = operator @ open control points
    deviation: float  # m, max sample deviation from the open spline
    gap: float  # m, distance between the open endpoints


class Fit(NamedTuple):
    spline: BSpline
    operator: np.ndarray  # control points = operator @ sample points


# ============ Knot vectors ============
def make_clamped_uniform_knots(n_control: int, order: int) -> np.ndarray:
    if n_control < order:
        raise InvalidConfigurationError(
            f"{n_control} control points cannot carry a spline of order {order}"
        )
    interior = np.linspace(0.0, 1.0, n_control - order + 2)[1:-1]
    return clamped_knots(interior, order)


def clamped_knots(interior, order: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.concatenate([np.full(order, lo), np.asarray(interior, dtype=float), np.full(order, hi)])


def periodic_knots(breakpoints, order: int) -> np.ndarray:
    """Knot vector of a closed spline whose spans are delimited by ``breakpoints``"""
    b = np.asarray(breakpoints, dtype=float)
    degree = order - 1
    n_spans = len(b) - 1
    if n_spans < order:
        raise InvalidConfigurationError(f"a closed spline of order {order} needs >= {order} spans")
    period = b[-1] - b[0]
    return np.concatenate([b[n_spans - degree:n_spans] - period, b, b[1:degree + 1] + period])


def breakpoints(spline: BSpline) -> np.ndarray:
    """Distinct knot values inside the domain"""
    return np.unique(spline.knots[spline.degree:len(spline.knots) - spline.degree])


# ============ Parameter handling ============
def _in_domain(spline: BSpline, u: np.ndarray) -> np.ndarray:
    lo, hi = spline.domain
    u = np.asarray(u, dtype=float)
    if spline.closed:
        outside = (u < lo) | (u > hi)
        return np.where(outside, lo + np.mod(u - lo, hi - lo), u)
    if np.any(u < lo - DOMAIN_EPS) or np.any(u > hi + DOMAIN_EPS):
        raise DomainError(f"parameter outside spline domain [{lo}, {hi}]")
    return np.clip(u, lo, hi)


# ============ Basis ============
def basis(knots, order: int, u: float) -> BasisRow:
    """Cox-de Boor basis row at u; the last span is closed on the right"""
    knots = np.asarray(knots, dtype=float)
    degree = order - 1
    n = len(knots) - order
    if n < order:
        raise InvalidConfigurationError("knot vector too short for the requested order")
    lo, hi = knots[degree], knots[n]
    if u < lo - DOMAIN_EPS or u > hi + DOMAIN_EPS:
        raise DomainError(f"u={u} outside [{lo}, {hi}]")
    u = min(max(float(u), lo), hi)
    row = _ScipyBSpline.design_matrix(np.array([u]), knots, degree).toarray()[0]
    span = int(np.searchsorted(knots, u, side="right")) - 1
    span = min(max(span, degree), n - 1)
    while span > degree and knots[span] == knots[span + 1]:
        span -= 1
    start = span - degree
    return BasisRow(start, row[start:start + order].copy())


def spline_basis(spline: BSpline, u: float) -> BasisRow:
    u = float(_in_domain(spline, u))
    row = basis(spline.knots, spline.order, u)
    if spline.closed:
        return BasisRow(row.start_index % spline.n_control, row.weights, spline.n_control)
    return row


def basis_matrix(spline: BSpline, us) -> np.ndarray:
    """Dense (len(us), n_control) basis matrix; wrapped columns folded for closed splines"""
    us = _in_domain(spline, np.atleast_1d(us))
    dense = _ScipyBSpline.design_matrix(us, spline.knots, spline.degree).toarray()
    if not spline.closed:
        return dense
    n = spline.n_control
    folded = dense[:, :n].copy()
    folded[:, : spline.degree] += dense[:, n:]
    return folded


# ============ Evaluation ============
def evaluate(spline: BSpline, u: float) -> np.ndarray:
    return np.asarray(spline._curve(float(_in_domain(spline, u))), dtype=float)


def evaluate_many(spline: BSpline, us) -> np.ndarray:
    return np.asarray(spline._curve(_in_domain(spline, np.atleast_1d(us))), dtype=float)


def derivative(spline: BSpline, u: float, der_order: int) -> np.ndarray:
    return derivative_many(spline, np.array([u]), der_order)[0]


def derivative_many(spline: BSpline, us, der_order: int) -> np.ndarray:
    if der_order not in (1, 2) or der_order > spline.order - 1:
        raise InvalidConfigurationError(
            f"derivative order {der_order} unsupported for a spline of order {spline.order}"
        )
    curve = spline._first_derivative if der_order == 1 else spline._second_derivative
    return np.asarray(curve(_in_domain(spline, np.atleast_1d(us))), dtype=float)


def curvature(spline: BSpline, u: float) -> Curvature:
    kappa, degenerate = _curvature(spline, np.array([u]))
    return Curvature(float(kappa[0]), bool(degenerate[0]))


def curvature_profile(spline: BSpline, us) -> np.ndarray:
    """Curvature at many parameters; degenerate points read as flat"""
    return _curvature(spline, np.atleast_1d(us))[0]


def _curvature(spline: BSpline, us: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if spline.order < 3:
        return np.zeros(len(us)), np.zeros(len(us), dtype=bool)
    d1 = derivative_many(spline, us, 1)
    d2 = derivative_many(spline, us, 2)
    speed_sq = np.einsum("ij,ij->i", d1, d1)
    degenerate = speed_sq < 1e-24
    cross = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    kappa = np.where(degenerate, 0.0, cross / np.maximum(speed_sq, 1e-24) ** 1.5)
    return kappa, degenerate


def polygon_length(spline: BSpline) -> float:
    return float(np.linalg.norm(np.diff(spline.coefficients, axis=0), axis=1).sum())


def arc_length(spline: BSpline, quadrature_order: int = 8) -> float:
    """Gauss-Legendre quadrature of the speed, one rule per knot span"""
    nodes, weights = np.polynomial.legendre.leggauss(quadrature_order)
    b = breakpoints(spline)
    half = 0.5 * (b[1:] - b[:-1])
    mid = 0.5 * (b[1:] + b[:-1])
    us = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    speed = np.linalg.norm(derivative_many(spline, us, 1), axis=1).reshape(len(mid), -1)
    return float(np.sum((speed @ weights) * half))


# ============ Projection ============
def project(spline: BSpline, point, samples_per_span: int = 8, tol: float = 1e-9) -> Projection:
    return project_many(spline, np.atleast_2d(point), samples_per_span, tol)[0]


def project_many(spline: BSpline, points, samples_per_span: int = 8, tol: float = 1e-9):
    """Closest parameter per point: coarse sampling, then bracketed Newton refinement"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = spline.domain
    b = breakpoints(spline)
    steps = np.arange(samples_per_span) / samples_per_span
    us = (b[:-1, None] + (b[1:] - b[:-1])[:, None] * steps[None, :]).ravel()
    if not spline.closed:
        us = np.append(us, hi)
    samples = evaluate_many(spline, us)
    sq = ((samples[None, :, :] - points[:, None, :]) ** 2).sum(axis=2)
    results = []
    for k, point in enumerate(points):
        i = int(np.argmin(sq[k]))
        if spline.closed:
            period = hi - lo
            lower = us[i - 1] if i > 0 else us[-1] - period
            upper = us[i + 1] if i + 1 < len(us) else us[0] + period
        else:
            lower = us[i - 1] if i > 0 else lo
            upper = us[i + 1] if i + 1 < len(us) else hi
        u = _newton_project(spline, point, us[i], lower, upper, tol)
        u = float(_in_domain(spline, u))
        distance = float(np.linalg.norm(evaluate(spline, u) - point))
        coarse = float(np.sqrt(sq[k, i]))
        if coarse < distance:
            u, distance = float(us[i]), coarse
        results.append(Projection(u, distance))
    return results


def _newton_project(spline: BSpline, point: np.ndarray, u: float, lower: float, upper: float, tol: float) -> float:
    for _ in range(50):
        uu = np.array([u])
        residual = evaluate_many(spline, uu)[0] - point
        d1 = derivative_many(spline, uu, 1)[0]
        d2 = derivative_many(spline, uu, 2)[0] if spline.order > 2 else np.zeros(2)
        gradient = residual @ d1
        hessian = d1 @ d1 + residual @ d2
        if hessian > 0:
            step = -gradient / hessian
        else:
            step = -gradient / max(d1 @ d1, 1e-12)
        u_next = min(max(u + step, lower), upper)
        if abs(u_next - u) < tol:
            return u_next
        u = u_next
    return u


# ============ Extension ============
def extend_to_point(spline: BSpline, new_point) -> Extension:
    """Unclamp the right end, append new_point as the last control point, re-clamp.

    The new span's knot width is the chord to new_point measured in units of the
    control polygon length, and the result is re-parameterised onto the old domain.
    """
    if spline.closed or not spline.clamped_right:
        raise InvalidStateError("only an open, right-clamped spline can be extended")
    new_point = np.asarray(new_point, dtype=float)
    control = spline.control_points
    n = len(control) - 1
    degree = spline.degree
    chord = float(np.linalg.norm(new_point - control[n]))
    if chord < COINCIDENT_EPS:
        logger.warning("extension point coincides with the spline end, nothing to do")
        return Extension(spline, n, False, np.eye(n + 1))

    lo, hi = spline.domain
    delta = (hi - lo) * chord / max(polygon_length(spline), chord)
    end = hi + delta

    knots = np.array(spline.knots)
    operator = np.eye(n + 1)
    for i in range(degree - 1):
        knots[n + i + 2] = end
        for j in range(i, -1, -1):
            alfa = (knots[n + 1] - knots[n - j]) / (knots[n - j + i + 2] - knots[n - j])
            operator[n - j] = (operator[n - j] - (1.0 - alfa) * operator[n - j - 1]) / alfa
    knots[n + degree + 1] = end

    new_knots = np.append(knots, end)
    new_knots = lo + (new_knots - lo) * (hi - lo) / (end - lo)
    new_control = np.vstack([operator @ control, new_point])
    return Extension(BSpline(spline.order, new_knots, new_control), n + 1, True, operator)


# ============ Fitting ============
def fit_spline(params, points, knots, order: int, closed: bool = False) -> Fit:
    """Least-squares control points for samples ``points`` located at ``params``"""
    knots = np.asarray(knots, dtype=float)
    n_coefficients = len(knots) - order
    n_control = n_coefficients - (order - 1 if closed else 0)
    template = BSpline(order, knots, np.zeros((n_control, 2)), closed)
    operator = linalg.pinv(basis_matrix(template, params))
    control = operator @ np.asarray(points, dtype=float)
    return Fit(template.with_control_points(control), operator)


# ============ Loop closure ============
def closing_operator(spline: BSpline, samples_per_control: int = 20) -> Closure:
    """Fit a closed spline to the open one plus the chord bridging its endpoints.

    The closed spline keeps n-1 control points (the duplicate endpoint is dropped)
    and places its breakpoints at the arc-length stations of the open spline's
    Greville abscissae.
    """
    if spline.closed:
        raise InvalidStateError("spline is already closed")
    n_open = spline.n_control
    n_closed = n_open - 1
    if n_closed < spline.order:
        raise InvalidStateError(f"closing needs at least {spline.order + 1} control points")

    lo, hi = spline.domain
    n_samples = samples_per_control * n_open
    us = np.linspace(lo, hi, n_samples)
    rows_open = basis_matrix(spline, us)
    samples = rows_open @ spline.control_points
    stations = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(samples, axis=0), axis=1))])
    open_length = stations[-1]
    gap = float(np.linalg.norm(samples[-1] - samples[0]))
    total = open_length + gap
    if total <= COINCIDENT_EPS:
        raise ClosureRejectedError("degenerate spline cannot be closed")

    n_gap = int(np.ceil(gap / max(open_length / n_samples, COINCIDENT_EPS))) if gap > COINCIDENT_EPS else 0
    lam = np.arange(1, n_gap + 1) / (n_gap + 1)
    rows_gap = (1.0 - lam)[:, None] * rows_open[-1][None, :] + lam[:, None] * rows_open[0][None, :]
    params = np.concatenate([stations / total, (open_length + lam * gap) / total])
    rows = np.vstack([rows_open, rows_gap])

    t = spline.knots
    greville = np.array([t[i + 1:i + spline.order].mean() for i in range(n_open)])
    b = np.append(np.interp(greville[:n_closed], us, stations) / total, 1.0)
    b[0] = 0.0
    for i in range(1, len(b)):
        b[i] = max(b[i], b[i - 1] + 1e-9)
    b = b / b[-1]

    template = BSpline(spline.order, periodic_knots(b, spline.order), np.zeros((n_closed, 2)), True)
    closed_rows = basis_matrix(template, params)
    operator = linalg.lstsq(closed_rows, rows)[0]
    closed = template.with_control_points(operator @ spline.control_points)
    fitted = closed_rows[:n_samples] @ closed.control_points
    deviation = float(np.max(np.linalg.norm(fitted - samples, axis=1)))
    return Closure(closed, operator, deviation, gap)


def checked_closure(spline: BSpline, closure_distance: float, tolerance: float) -> Closure:
    if spline.closed:
        raise InvalidStateError("spline is already closed")
    lo, hi = spline.domain
    gap = float(np.linalg.norm(evaluate(spline, hi) - evaluate(spline, lo)))
    if gap > closure_distance:
        raise ClosureRejectedError(f"endpoints {gap:.2f} m apart exceed closure distance {closure_distance} m")
    closure = closing_operator(spline)
    if closure.deviation > tolerance:
        raise ClosureRejectedError(
            f"closed fit deviates {closure.deviation:.3f} m from the open spline (tolerance {tolerance} m)"
        )
    return closure


def close_loop(spline: BSpline, closure_distance: float = 15.0, tolerance: float = 0.5) -> BSpline:
    return checked_closure(spline, closure_distance, tolerance).spline
