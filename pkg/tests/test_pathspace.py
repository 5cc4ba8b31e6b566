from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import FrameProcessingError, InvalidArgumentError, InvalidConfigurationError, InvalidStateError, NumericError
from app.pathspace import (
    AgentPose,
    ClassifierParams,
    Detection,
    JointBelief,
    SplineMeasurement,
    belief_from_snapshot,
    belief_to_snapshot,
    check_loop_closure,
    chord_parameters,
    classify_detections,
    close_belief_loop,
    extend_belief,
    fit_measurement_spline,
    kalman_update,
    motion_jacobians,
    observed_subspace,
    order_expansion_chain,
    predict,
    process_frame,
    simplification_budget,
    simplify,
    wrap_angle,
)
from app.schemas import BeliefSnapshot, PathSpaceParams
from app.spline_core import BSpline, evaluate, evaluate_many, make_clamped_uniform_knots, project, spline_basis
from factories import belief_with, circle_spline, is_psd, line_spline, max_deviation, sine_spline

SENSOR = 0.01 * np.eye(2)


def detection_at(pose: AgentPose, world, label="blue", cov=SENSOR):
    return Detection(pose.to_local(np.asarray(world, dtype=float)), label, cov)


# ============ Pose and prediction ============
def test_heading_is_wrapped():
    assert AgentPose(0, 0, 3 * np.pi).heading == pytest.approx(np.pi)
    assert AgentPose(0, 0, -np.pi).heading == pytest.approx(np.pi)
    assert wrap_angle(-3 * np.pi / 2) == pytest.approx(np.pi / 2)


def test_predict_zero_motion_is_identity():
    belief = belief_with({"blue": line_spline()})
    predicted = predict(belief, (0.0, 0.0, 0.0), np.zeros((3, 3)))
    assert predicted.pose == belief.pose
    assert_allclose(predicted.covariance, belief.covariance)


def test_predict_forward_motion():
    belief = belief_with({})
    predicted = predict(belief, (1.0, 0.0, 0.0), np.zeros((3, 3)))
    assert predicted.pose.x == pytest.approx(1.0)
    assert predicted.pose.y == pytest.approx(0.0)


def test_predict_trace_grows_and_map_mean_kept(rng):
    belief = belief_with({"blue": line_spline()}, pose=AgentPose(1.0, 2.0, 0.3))
    noise = np.diag([1e-3, 1e-3, 1e-4])
    for _ in range(20):
        predicted = predict(belief, rng.normal(0.0, 1.0, 3), noise)
        assert np.trace(predicted.covariance) >= np.trace(belief.covariance)
        assert_allclose(predicted.splines["blue"].control_points, belief.splines["blue"].control_points)
        assert is_psd(predicted.covariance)


def test_predict_covariance_is_first_order_propagation(rng):
    belief = belief_with({"blue": line_spline(n_control=4)}, pose=AgentPose(1.0, 2.0, 0.3))
    factor = rng.normal(0.0, 0.1, (belief.dimension, belief.dimension))
    belief = JointBelief(belief.pose, factor @ factor.T, belief.splines)
    noise = np.diag([1e-3, 4e-4, 1e-4])
    odometry = np.array([1.2, -0.3, 0.05])
    jac_pose, jac_odometry = motion_jacobians(belief.pose, odometry)
    full = np.eye(belief.dimension)
    full[:3, :3] = jac_pose
    expected = full @ belief.covariance @ full.T
    expected[:3, :3] += jac_odometry @ noise @ jac_odometry.T
    assert_allclose(predict(belief, odometry, noise).covariance, expected, atol=1e-12)


# ============ Classification ============
def test_classification_rules():
    spline = line_spline(length=50.0, n_control=10)
    belief = belief_with({"blue": spline})
    params = ClassifierParams(growth_threshold=2.0, separation_threshold=2.0, endpoint_u_tolerance=1e-3)
    pose = belief.pose
    detections = [
        detection_at(pose, [20.0, 0.5]),   # interior
        detection_at(pose, [55.0, 0.0]),   # beyond the end, far enough
        detection_at(pose, [51.0, 0.0]),   # beyond the end, too close
        detection_at(pose, [10.0, 3.0], label="purple"),
    ]
    result = classify_detections(belief, detections, params, labels=["blue", "yellow"])
    blue = result.labels["blue"]
    assert len(blue.expansion) == 1
    assert_allclose(blue.expansion[0].point, [55.0, 0.0], atol=1e-12)
    assert len(blue.update) == 2
    assert len(result.rejected) == 1


def test_closed_spline_never_expands():
    belief = belief_with({"blue": circle_spline(radius=20.0)})
    far = detection_at(belief.pose, [30.0, 0.0])
    result = classify_detections(belief, [far], ClassifierParams())
    assert result.labels["blue"].expansion == []
    assert len(result.labels["blue"].update) == 1


def test_unmapped_label_goes_to_pending():
    belief = belief_with({})
    result = classify_detections(belief, [detection_at(belief.pose, [3.0, 2.0])], ClassifierParams(), labels=["blue"])
    assert len(result.labels["blue"].pending) == 1


def test_classifier_params_must_be_positive():
    with pytest.raises(InvalidConfigurationError):
        ClassifierParams(growth_threshold=0.0)


# ============ Expansion chain ============
def test_chain_single_point():
    assert order_expansion_chain([[3.0, 4.0]], [0.0, 0.0]) == [0]


def test_chain_collinear_points():
    points = [[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
    assert order_expansion_chain(points, [0.0, 0.0]) == [1, 2, 0]


def test_chain_greedy_order():
    points = [[1.0, 0.0], [0.0, 1.1], [2.0, 0.0]]
    assert order_expansion_chain(points, [0.0, 0.0]) == [0, 2, 1]


def test_chain_empty_raises():
    with pytest.raises(InvalidArgumentError):
        order_expansion_chain(np.empty((0, 2)), [0.0, 0.0])


# ============ Extension ============
def test_extend_with_exact_pose_uses_sensor_covariance():
    belief = belief_with({"blue": line_spline()}, pose_var=0.0)
    extended = extend_belief(belief, "blue", [55.0, 0.0], SENSOR)
    assert extended.dimension == belief.dimension + 2
    block = extended.block("blue")
    assert_allclose(extended.covariance[block.stop - 2:block.stop, block.stop - 2:block.stop], SENSOR, atol=1e-12)
    assert is_psd(extended.covariance)


def test_extend_keeps_other_blocks_in_place():
    belief = belief_with({"blue": line_spline(), "yellow": line_spline(heading=0.2)})
    extended = extend_belief(belief, "blue", [56.0, 1.0], SENSOR)
    assert extended.offsets()["yellow"] == belief.offsets()["yellow"] + 2
    yellow_old, yellow_new = belief.block("yellow"), extended.block("yellow")
    assert_allclose(extended.covariance[yellow_new, yellow_new], belief.covariance[yellow_old, yellow_old])
    assert_allclose(extended.covariance, extended.covariance.T)
    assert is_psd(extended.covariance)


def test_extend_closed_spline_raises():
    belief = belief_with({"blue": circle_spline()})
    with pytest.raises(InvalidStateError):
        extend_belief(belief, "blue", [40.0, 0.0], SENSOR)


# ============ Measurement fit ============
def test_large_regularization_keeps_prior():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    measurement = fit_measurement_spline(belief, "blue", [[20.0, 1.0], [22.0, 1.5]], [SENSOR, SENSOR], lam=1e9)
    prior = spline.control_points[measurement.affected_indices].ravel()
    assert_allclose(measurement.control_values, prior, atol=1e-6)


def test_readings_on_curve_are_a_fixed_point(rng):
    spline = sine_spline(n_control=20)
    belief = belief_with({"blue": spline})
    points = evaluate_many(spline, rng.uniform(0.2, 0.8, 6))
    measurement = fit_measurement_spline(belief, "blue", points, [SENSOR] * 6, lam=1.0)
    prior = spline.control_points[measurement.affected_indices].ravel()
    assert_allclose(measurement.control_values, prior, atol=1e-9)


def _dense_regularized_solve(spline, points, lam):
    """Independent solve of min |B C - y|^2 + (C - C_mu)' L (C - C_mu) over the affected columns"""
    rows = []
    for p in points:
        rows.append(spline_basis(spline, project(spline, p).u))
    cols = np.arange(min(r.start_index for r in rows), max(r.start_index for r in rows) + spline.order)
    basis = np.zeros((len(points), len(cols)))
    for i, row in enumerate(rows):
        basis[i, row.start_index - cols[0]:row.start_index - cols[0] + spline.order] = row.weights
    penalty = lam * np.diag(1.0 - basis.sum(axis=0) / len(points))
    lhs = np.vstack([basis, np.sqrt(np.maximum(np.diag(penalty), 0.0))[:, None] * np.eye(len(cols))])
    prior = spline.control_points[cols]
    rhs = np.vstack([np.asarray(points), np.sqrt(np.maximum(np.diag(penalty), 0.0))[:, None] * prior])
    solution, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return cols, solution


def test_fit_matches_dense_least_squares(rng):
    for _ in range(200):
        n = int(rng.integers(5, 13))
        spline = BSpline(4, make_clamped_uniform_knots(n, 4), np.cumsum(rng.normal(1.0, 0.3, (n, 2)), axis=0) * 5)
        m = int(rng.integers(1, 11))
        points = evaluate_many(spline, rng.uniform(0.05, 0.95, m)) + rng.normal(0.0, 0.3, (m, 2))
        belief = belief_with({"blue": spline})
        lam = float(rng.uniform(0.1, 5.0))
        measurement = fit_measurement_spline(belief, "blue", points, [SENSOR] * m, lam)
        cols, expected = _dense_regularized_solve(spline, points, lam)
        assert_allclose(measurement.affected_indices, cols)
        assert_allclose(measurement.control_values, expected.ravel(), atol=1e-8)


def test_fit_covariance_is_linear_propagation():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    measurement = fit_measurement_spline(belief, "blue", [[20.0, 0.3]], [SENSOR], lam=1.0)
    assert_allclose(measurement.covariance, measurement.covariance.T)
    assert is_psd(measurement.covariance)
    assert np.trace(measurement.covariance) > 0


def test_fit_empty_update_set_raises():
    belief = belief_with({"blue": line_spline()})
    with pytest.raises(InvalidArgumentError):
        fit_measurement_spline(belief, "blue", np.empty((0, 2)), [], lam=1.0)


def test_fit_on_closed_spline_uses_circular_cover():
    spline = circle_spline(radius=20.0, n_control=12)
    belief = belief_with({"blue": spline})
    seam = evaluate(spline, 0.999) + [0.2, 0.0]
    measurement = fit_measurement_spline(belief, "blue", [seam], [SENSOR], lam=1.0)
    assert set(measurement.affected_indices) == {11, 0, 1, 2}


# ============ Kalman update ============
def test_update_with_mean_measurement_keeps_mean():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    affected = np.array([2, 3, 4])
    measurement = SplineMeasurement(spline.control_points[affected].ravel(), 0.05 * np.eye(6), affected, "blue", np.array([]))
    updated = kalman_update(belief, measurement)
    assert_allclose(updated.mean_vector(), belief.mean_vector(), atol=1e-12)
    assert np.trace(updated.covariance) <= np.trace(belief.covariance)


def test_update_with_huge_measurement_covariance_is_noop():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    affected = np.array([1, 2])
    values = spline.control_points[affected].ravel() + 3.0
    measurement = SplineMeasurement(values, 1e12 * np.eye(4), affected, "blue", np.array([]))
    updated = kalman_update(belief, measurement)
    assert_allclose(updated.mean_vector(), belief.mean_vector(), atol=1e-6)
    assert_allclose(updated.covariance, belief.covariance, atol=1e-6)


def test_update_matches_scalar_kalman():
    spline = line_spline()
    prior_var, meas_var = 0.04, 0.01
    belief = belief_with({"blue": spline}, control_var=prior_var)
    affected = np.array([5])
    z = spline.control_points[5] + np.array([0.3, -0.2])
    measurement = SplineMeasurement(z, meas_var * np.eye(2), affected, "blue", np.array([]))
    updated = kalman_update(belief, measurement)
    gain = prior_var / (prior_var + meas_var)
    expected = spline.control_points[5] + gain * np.array([0.3, -0.2])
    assert_allclose(updated.splines["blue"].control_points[5], expected, atol=1e-12)
    block = updated.block("blue")
    idx = block.start + 10
    assert updated.covariance[idx, idx] == pytest.approx(prior_var * meas_var / (prior_var + meas_var), abs=1e-12)
    assert_allclose(updated.splines["blue"].control_points[4], spline.control_points[4], atol=1e-12)


def test_update_moves_correlated_pose():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    covariance = np.array(belief.covariance)
    block = belief.block("blue")
    covariance[0, block.start] = covariance[block.start, 0] = 5e-5
    belief = JointBelief(belief.pose, covariance, belief.splines)
    affected = np.array([0])
    z = spline.control_points[0] + np.array([0.5, 0.0])
    updated = kalman_update(belief, SplineMeasurement(z, 0.01 * np.eye(2), affected, "blue", np.array([])))
    assert updated.pose.x > belief.pose.x


def test_observed_subspace_drops_null_directions():
    basis, variances = observed_subspace(np.diag([0.02, 0.01, 0.0, 0.0]))
    assert basis.shape == (4, 2)
    assert_allclose(np.sort(variances), [0.01, 0.02])
    assert observed_subspace(np.zeros((4, 4)))[1].size == 0


def test_update_leaves_unobserved_coordinates_alone():
    spline = line_spline()
    belief = belief_with({"blue": spline})
    affected = np.array([3, 4])
    values = spline.control_points[affected].ravel() + 0.5
    measurement = SplineMeasurement(values, np.diag([0.01, 0.01, 0.0, 0.0]), affected, "blue", np.array([]))
    updated = kalman_update(belief, measurement)
    idx = belief.block("blue").start + 6 + np.arange(4)
    assert_allclose(updated.covariance[idx[2:], idx[2:]], belief.covariance[idx[2:], idx[2:]])
    assert_allclose(updated.splines["blue"].control_points[4], spline.control_points[4], atol=1e-12)
    assert np.all(np.diag(updated.covariance)[idx[:2]] < np.diag(belief.covariance)[idx[:2]])


def test_repeated_single_reading_updates_stay_positive_definite():
    belief = belief_with({"blue": line_spline(length=30.0, n_control=8)})
    for _ in range(10):
        measurement = fit_measurement_spline(belief, "blue", [[15.0, 0.3]], [SENSOR], lam=1.0)
        assert np.linalg.matrix_rank(measurement.covariance) < measurement.covariance.shape[0]
        belief = kalman_update(belief, measurement)
        block = belief.block("blue")
        assert np.linalg.eigvalsh(belief.covariance[block, block]).min() > 0
    assert is_psd(belief.covariance)


# ============ Simplification ============
def test_simplify_straight_line():
    belief = belief_with({"blue": line_spline(length=200.0, n_control=100)})
    simplified = simplify(belief, "blue", 10, 0.2)
    spline = simplified.splines["blue"]
    assert spline.n_control == 10
    assert simplified.dimension == 3 + 20
    assert max_deviation(belief.splines["blue"], spline) < 1e-3
    assert_allclose(spline.control_points[[0, -1]], [[0.0, 0.0], [200.0, 0.0]], atol=1e-6)
    assert is_psd(simplified.covariance)


def test_chord_parameters_follow_arc_length():
    samples = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    assert_allclose(chord_parameters(samples, 0.0, 1.0, closed=False), [0.0, 0.25, 0.75, 1.0])
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert_allclose(chord_parameters(square, 0.0, 2.0, closed=True), [0.0, 0.5, 1.0, 1.5])
    assert_allclose(chord_parameters(np.zeros((3, 2)), 0.0, 1.0, closed=False), [0.0, 0.5, 1.0])


def test_simplify_to_same_count_is_near_noop():
    original = sine_spline(n_control=30)
    belief = belief_with({"blue": original})
    simplified = simplify(belief, "blue", 30, 0.2)
    assert max_deviation(original, simplified.splines["blue"]) < 1e-6


def test_simplify_winding_curve_from_100_to_32():
    original = sine_spline(n_control=100)
    belief = belief_with({"blue": original})
    simplified = simplify(belief, "blue", 32, 0.2)
    assert simplified.splines["blue"].n_control == 32
    assert max_deviation(original, simplified.splines["blue"]) < 0.2


def test_simplify_below_minimum_raises():
    belief = belief_with({"blue": line_spline()})
    with pytest.raises(InvalidArgumentError):
        simplify(belief, "blue", 4, 0.2)


def test_simplify_maps_cross_terms():
    belief = belief_with({"blue": line_spline(length=100.0, n_control=30), "yellow": line_spline(heading=1.0)})
    covariance = np.array(belief.covariance)
    blue, yellow = belief.block("blue"), belief.block("yellow")
    cross = 1e-3 * np.ones((blue.stop - blue.start, yellow.stop - yellow.start)) / 60
    covariance[blue, yellow] = cross
    covariance[yellow, blue] = cross.T
    belief = JointBelief(belief.pose, covariance, belief.splines)
    simplified = simplify(belief, "blue", 12, 0.2)
    assert simplified.dimension == 3 + 24 + 20
    assert_allclose(simplified.covariance, simplified.covariance.T)
    assert is_psd(simplified.covariance)
    new_yellow = simplified.block("yellow")
    assert_allclose(simplified.covariance[new_yellow, new_yellow], belief.covariance[yellow, yellow])


def test_simplify_closed_spline_stays_closed():
    belief = belief_with({"blue": circle_spline(radius=30.0, n_control=40)})
    simplified = simplify(belief, "blue", 16, 0.2)
    spline = simplified.splines["blue"]
    assert spline.closed and spline.n_control == 16
    assert max_deviation(belief.splines["blue"], spline) < 0.05


def test_simplification_budget_from_arc_length():
    spline = line_spline(length=120.0, n_control=40)
    assert simplification_budget(spline, 12.0) == 10
    assert simplification_budget(line_spline(length=10.0, n_control=8), 12.0) == 5


# ============ Loop closure ============
def _long_open_loop():
    return circle_spline(radius=30.0, n_control=40, closed=False, arc=2 * np.pi * 0.97)


def test_loop_closure_needs_length():
    belief = belief_with({"blue": line_spline(length=50.0)})
    belief = JointBelief(belief.pose, belief.covariance, belief.splines, last_update_u={"blue": (0.05,)})
    assert not check_loop_closure(belief, "blue", 150.0, 15.0)


def test_loop_closure_needs_early_association():
    belief = belief_with({"blue": _long_open_loop()})
    late = JointBelief(belief.pose, belief.covariance, belief.splines, last_update_u={"blue": (0.97, 0.99)})
    early = JointBelief(belief.pose, belief.covariance, belief.splines, last_update_u={"blue": (0.99, 0.05)})
    assert not check_loop_closure(late, "blue", 150.0, 15.0)
    assert check_loop_closure(early, "blue", 150.0, 15.0)


def test_close_belief_loop_drops_one_control_point():
    belief = belief_with({"blue": _long_open_loop()})
    closed = close_belief_loop(belief, "blue", 15.0, 1.0)
    assert closed.splines["blue"].closed
    assert closed.dimension == belief.dimension - 2
    assert is_psd(closed.covariance)


# ============ Frame pipeline ============
def _params(**overrides):
    return PathSpaceParams(**overrides)


def test_empty_frame_is_prediction_only():
    belief = belief_with({"blue": line_spline()})
    outcome = process_frame(belief, [], (1.0, 0.0, 0.0), _params(), np.zeros((3, 3)))
    assert outcome.belief.pose.x == pytest.approx(1.0)
    assert outcome.belief.dimension == belief.dimension
    assert outcome.belief.frame == 1
    assert outcome.report.updated == []


def test_interior_detections_keep_dimension():
    belief = belief_with({"blue": line_spline(length=50.0)})
    detections = [detection_at(belief.pose, [10.0, 0.2]), detection_at(belief.pose, [14.0, -0.1])]
    outcome = process_frame(belief, detections, (0.0, 0.0, 0.0), _params(), np.zeros((3, 3)))
    assert outcome.belief.dimension == belief.dimension
    assert outcome.report.updated == ["blue"]


def test_expansion_grows_at_most_once_per_label():
    belief = belief_with({"blue": line_spline(length=50.0)}, pose=AgentPose(45.0, 0.0, 0.0))
    detections = [detection_at(belief.pose, [54.0, 0.0]), detection_at(belief.pose, [58.0, 0.0])]
    outcome = process_frame(belief, detections, (0.0, 0.0, 0.0), _params(), np.zeros((3, 3)))
    assert outcome.belief.dimension == belief.dimension + 2
    assert outcome.report.extended == ["blue"]
    assert_allclose(outcome.belief.splines["blue"].control_points[-1], [58.0, 0.0], atol=0.5)


def test_bootstrap_starts_spline_from_buffered_points():
    belief = belief_with({})
    params = _params(labels=["blue"])
    first = [detection_at(belief.pose, [x, 2.0]) for x in (3.0, 8.0)]
    belief = process_frame(belief, first, (0.0, 0.0, 0.0), params, np.zeros((3, 3))).belief
    assert "blue" not in belief.splines
    later = [detection_at(belief.pose, [x, 2.0]) for x in (8.1, 13.0, 18.0, 23.0)]
    outcome = process_frame(belief, later, (0.0, 0.0, 0.0), params, np.zeros((3, 3)))
    spline = outcome.belief.splines["blue"]
    assert outcome.report.bootstrapped == ["blue"]
    assert spline.n_control == 5
    assert_allclose(spline.control_points[0], [3.0, 2.0], atol=1e-9)
    assert outcome.belief.dimension == 3 + 10


def test_random_frames_keep_covariance_psd(rng):
    belief = belief_with({"blue": line_spline(length=30.0, n_control=8)}, pose=AgentPose(20.0, -2.0, 0.0))
    params = _params(labels=["blue"], simplify_every=50)
    noise = np.diag([1e-4, 1e-4, 1e-6])
    truth_y = 0.0
    for frame in range(200):
        odometry = np.array([0.5, 0.0, 0.0]) + rng.normal(0.0, 0.01, 3) * [1, 1, 0.01]
        pose = belief.pose
        ahead = np.array([[pose.x + d, truth_y + rng.normal(0.0, 0.05)] for d in (3.0, 6.0, 9.0)])
        detections = [detection_at(pose, p) for p in ahead]
        before = belief.dimension
        outcome = process_frame(belief, detections, odometry, params, noise)
        belief = outcome.belief
        assert belief.dimension - before <= 2 or outcome.report.simplified
        assert belief.dimension == 3 + 2 * belief.control_count
        eigenvalues = np.linalg.eigvalsh(belief.covariance)
        assert eigenvalues.min() >= -1e-8 * eigenvalues.max()
    assert belief.splines["blue"].n_control > 8


def test_frame_error_carries_frame_index_and_label(monkeypatch):
    def failing_update(belief, measurement):
        raise NumericError("innovation covariance is not invertible")

    monkeypatch.setattr("app.pathspace.kalman_update", failing_update)
    belief = replace(belief_with({"blue": line_spline()}), frame=7)
    with pytest.raises(FrameProcessingError) as info:
        process_frame(belief, [detection_at(belief.pose, [10.0, 0.3])], (0.0, 0.0, 0.0), _params(), np.zeros((3, 3)))
    assert info.value.frame == 7
    assert info.value.label == "blue"
    assert isinstance(info.value.cause, NumericError)


# ============ Snapshots ============
def test_snapshot_round_trip():
    belief = belief_with({"blue": line_spline(), "yellow": circle_spline(n_control=8)})
    snapshot = belief_to_snapshot(belief)
    parsed = BeliefSnapshot.model_validate_json(snapshot.model_dump_json())
    restored = belief_from_snapshot(parsed)
    assert list(restored.splines) == ["blue", "yellow"]
    assert restored.splines["yellow"].closed
    assert_allclose(restored.covariance, belief.covariance)
    assert_allclose(restored.mean_vector(), belief.mean_vector())
