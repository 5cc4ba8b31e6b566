import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import InvalidConfigurationError, TrackGenerationError
from app.pathspace import AgentPose, compose
from app.schemas import ExperimentConfig, SensorModel, SimulationParams, Straight, TrackSpec, circle_track_spec
from app.simworld import (
    LEFT_LABEL,
    RIGHT_LABEL,
    TrackGroundTruth,
    blind_cones,
    drive_step,
    generate_track,
    load_track,
    save_track,
    sense,
    simulate,
)


def single_cone_track(cones):
    centerline = np.stack([np.linspace(0.0, 50.0, 201), np.zeros(201)], axis=1)
    stations = centerline[:, 0].copy()
    return TrackGroundTruth(centerline, stations, {"blue": np.asarray(cones, dtype=float).reshape(-1, 2)}, 100.0, 4.0)


def small_config(**overrides):
    values = dict(track=circle_track_spec(20.0), laps=1, seed=3)
    values.update(overrides)
    return ExperimentConfig(**values)


# ============ Track generation ============
def test_circle_cones_sit_on_two_rings():
    truth = generate_track(circle_track_spec(30.0, track_width=4.0))
    center = np.array([0.0, 30.0])
    assert_allclose(np.linalg.norm(truth.cones[LEFT_LABEL] - center, axis=1), 28.0, atol=1e-9)
    assert_allclose(np.linalg.norm(truth.cones[RIGHT_LABEL] - center, axis=1), 32.0, atol=1e-9)
    assert truth.lap_length == pytest.approx(2 * math.pi * 30.0)


def test_default_track_cone_count():
    spec = TrackSpec()
    truth = generate_track(spec)
    assert truth.lap_length == pytest.approx(500.0, rel=0.01)
    expected = 2 * truth.lap_length / spec.cone_spacing
    assert abs(truth.cone_count - expected) <= 0.05 * expected
    assert len(truth.cones[LEFT_LABEL]) == len(truth.cones[RIGHT_LABEL])


def test_total_length_rescales_layout():
    truth = generate_track(TrackSpec(total_length=300.0))
    assert truth.lap_length == pytest.approx(300.0)


def test_generation_is_deterministic_with_jitter():
    spec = TrackSpec(cone_jitter=0.2, seed=11)
    first, second = generate_track(spec), generate_track(spec)
    assert_allclose(first.cones[LEFT_LABEL], second.cones[LEFT_LABEL])
    other = generate_track(TrackSpec(cone_jitter=0.2, seed=12))
    assert not np.allclose(first.cones[LEFT_LABEL], other.cones[LEFT_LABEL])


def test_open_layout_is_rejected():
    with pytest.raises(TrackGenerationError) as info:
        generate_track(TrackSpec(elements=[Straight(length=10.0)]))
    assert info.value.residual_gap == pytest.approx(10.0, abs=1e-6)


def test_track_file_round_trip(tmp_path):
    truth = generate_track(circle_track_spec(25.0))
    path = tmp_path / "track.json"
    save_track(truth, path)
    loaded = load_track(path)
    assert loaded.lap_length == pytest.approx(truth.lap_length)
    assert_allclose(loaded.cones[RIGHT_LABEL], truth.cones[RIGHT_LABEL])
    assert_allclose(loaded.centerline, truth.centerline)


def test_point_at_wraps_station():
    truth = generate_track(circle_track_spec(20.0))
    assert_allclose(truth.point_at(truth.lap_length + 1.0), truth.point_at(1.0), atol=1e-9)


# ============ Sensing ============
def test_sense_empty_track(rng):
    truth = single_cone_track(np.empty((0, 2)))
    assert sense(AgentPose(0, 0, 0), truth, SensorModel(), rng) == []


def test_sense_with_zero_probability(rng):
    truth = single_cone_track([[5.0, 0.0]])
    assert sense(AgentPose(0, 0, 0), truth, SensorModel(detection_probability=0.0), rng) == []


def test_cone_dead_ahead(rng):
    truth = single_cone_track([[5.0, 0.0]])
    model = SensorModel(position_noise_std=0.0, detection_probability=1.0)
    detections = sense(AgentPose(0, 0, 0), truth, model, rng)
    assert len(detections) == 1
    assert_allclose(detections[0].position, [5.0, 0.0])
    assert detections[0].label == "blue"


def test_sense_respects_range_and_field_of_view(rng):
    cones = [
        [5.0, 0.0],
        [-5.0, 0.0],
        [13.0, 0.0],
        [5.0 * math.cos(math.radians(60.0)), 5.0 * math.sin(math.radians(60.0))],
    ]
    model = SensorModel(max_range=12.0, field_of_view=math.radians(110.0), position_noise_std=0.0, detection_probability=1.0)
    detections = sense(AgentPose(0, 0, 0), single_cone_track(cones), model, rng)
    assert [tuple(d.position) for d in detections] == [(5.0, 0.0)]


def test_sensed_positions_are_in_agent_frame(rng):
    truth = single_cone_track([[10.0, 10.0]])
    model = SensorModel(position_noise_std=0.0, detection_probability=1.0)
    detections = sense(AgentPose(10.0, 5.0, math.pi / 2), truth, model, rng)
    assert_allclose(detections[0].position, [5.0, 0.0], atol=1e-12)


def test_blind_cones_are_never_reported(rng):
    truth = single_cone_track([[5.0, 0.0], [8.0, 1.0]])
    model = SensorModel(position_noise_std=0.0, detection_probability=1.0)
    blind = {"blue": np.array([True, False])}
    for _ in range(10):
        detections = sense(AgentPose(0, 0, 0), truth, model, rng, blind)
        assert [tuple(d.position) for d in detections] == [(8.0, 1.0)]


def test_blind_cone_count_per_label(rng):
    truth = generate_track(TrackSpec())
    masks = blind_cones(truth, 0.15, rng)
    for label, cones in truth.cones.items():
        assert masks[label].sum() == round(0.15 * len(cones))
    assert not any(mask.any() for mask in blind_cones(truth, 0.0, rng).values())


def test_blind_cones_stay_hidden_for_the_whole_stream():
    config = small_config(sensor=SensorModel(blind_fraction=0.3, position_noise_std=0.0, detection_probability=1.0))
    stream = simulate(config)
    seen = set()
    for frame in stream.frames:
        for detection in frame.detections:
            world = frame.true_pose.to_world(detection.position)
            cones = stream.truth.cones[detection.label]
            seen.add((detection.label, int(np.argmin(np.linalg.norm(cones - world, axis=1)))))
    total = stream.truth.cone_count
    hidden = sum(round(0.3 * len(c)) for c in stream.truth.cones.values())
    assert len(seen) <= total - hidden


# ============ Driving ============
def test_zero_speed_stays_put(rng):
    truth = generate_track(circle_track_spec(20.0))
    pose = truth.start_pose()
    moved, odometry = drive_step(pose, truth, 0.0, 0.1, (0.0, 0.0, 0.0), rng)
    assert moved == pose
    assert_allclose(odometry, 0.0)


def test_noise_free_odometry_is_exact(rng):
    truth = generate_track(TrackSpec())
    pose = truth.start_pose()
    for _ in range(50):
        moved, odometry = drive_step(pose, truth, 8.0, 0.1, (0.0, 0.0, 0.0), rng)
        expected = compose(pose, odometry)
        assert_allclose([expected.x, expected.y, expected.heading], [moved.x, moved.y, moved.heading], atol=1e-12)
        pose = moved


def test_drive_step_rejects_bad_dt(rng):
    truth = generate_track(circle_track_spec(20.0))
    with pytest.raises(InvalidConfigurationError):
        drive_step(truth.start_pose(), truth, 8.0, 0.0, (0.0, 0.0, 0.0), rng)


def test_driver_follows_centerline(rng):
    truth = generate_track(circle_track_spec(30.0))
    pose = truth.start_pose()
    for _ in range(300):
        pose, _ = drive_step(pose, truth, 8.0, 0.1, (0.0, 0.0, 0.0), rng)
        radius = np.linalg.norm(pose.position - [0.0, 30.0])
        assert abs(radius - 30.0) < 0.5


# ============ Streams ============
def test_one_lap_path_length():
    config = small_config(simulation=SimulationParams(odometry_noise_std=(0.0, 0.0, 0.0)))
    stream = simulate(config)
    assert len(stream.lap_ends) == 1
    driven = len(stream.frames) * config.simulation.speed * config.simulation.dt
    assert driven == pytest.approx(stream.truth.lap_length, rel=0.03)


def test_simulation_is_deterministic():
    first, second = simulate(small_config()), simulate(small_config())
    assert first.checksum == second.checksum
    assert len(first.frames) == len(second.frames)
    assert_allclose(first.frames[-1].odometry, second.frames[-1].odometry)
    assert simulate(small_config(seed=4)).checksum != first.checksum


def test_stream_covariances():
    stream = simulate(small_config())
    assert_allclose(stream.odometry_covariance, np.diag(np.square((0.01, 0.005, 5e-4))))
    assert_allclose(stream.initial_covariance, np.eye(3) * 1e-6)
    assert stream.initial_pose == stream.truth.start_pose()


def test_zero_speed_simulation_is_rejected():
    with pytest.raises(InvalidConfigurationError):
        simulate(small_config(simulation=SimulationParams(speed=0.0)))
