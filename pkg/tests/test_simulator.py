import math

import numpy as np
import pytest

from railodo.errors import DiscontinuousTangent, ProfileOverrunsPath
from railodo.geometry import inverse, project_camera, triangulate_stereo
from railodo.preintegration import ImuBias, NoiseParams, integrate, predict_state
from railodo.simulator import (Arc, Hold, ImuSpec, PathSpec, Ramp, ScenarioConfig,
                               SpeedProfileSpec, Straight, build_path, generate_imu,
                               generate_landmarks, mismatch_fraction, sample_trajectory,
                               simulate, straight_scenario)


# --------------------------------------------------------------------------- #
# Path and speed profile
# --------------------------------------------------------------------------- #

def test_straight_path():
    path = build_path(PathSpec((Straight(100.0),)))
    s = np.linspace(0, 100, 11)
    np.testing.assert_allclose(path.position(s), np.column_stack([s, np.zeros_like(s)]), atol=1e-12)
    np.testing.assert_allclose(path.tangent(s), np.tile([1.0, 0.0], (11, 1)), atol=1e-12)


def test_quarter_circle():
    path = build_path(PathSpec((Arc(100.0, math.pi / 2),)))
    L = path.length
    assert abs(L - 50 * math.pi) < 1e-9
    np.testing.assert_allclose(path.position(L)[0], [100.0, 100.0], atol=1e-9)
    np.testing.assert_allclose(path.tangent(L)[0], [0.0, 1.0], atol=1e-12)


def test_composite_length():
    spec = PathSpec((Straight(50.0), Arc(200.0, 0.3), Straight(50.0)))
    assert abs(spec.length - 160.0) < 1e-9
    assert abs(build_path(spec).length - 160.0) < 1e-9


def test_tangent_continuity_at_junctions():
    path = build_path(PathSpec((Straight(50.0), Arc(200.0, 0.3), Straight(50.0), Arc(80.0, -1.0))))
    for s in (50.0, 110.0, 160.0):
        a, b = path.tangent([s - 1e-7, s + 1e-7])
        assert np.linalg.norm(a - b) < 1e-6


def test_explicit_heading_mismatch_raises():
    with pytest.raises(DiscontinuousTangent):
        build_path(PathSpec((Arc(100.0, 0.5), Straight(10.0, heading=0.0))))
    build_path(PathSpec((Arc(100.0, 0.5), Straight(10.0, heading=0.5))))


@pytest.mark.parametrize("bad", [(Straight(0.0),), (Arc(5.0, 0.1),), ()])
def test_path_spec_validation(bad):
    with pytest.raises(ValueError):
        PathSpec(bad)


def test_speed_profile_continuity_enforced():
    with pytest.raises(ValueError):
        SpeedProfileSpec((Hold(10.0, 1.0), Hold(12.0, 1.0)))
    with pytest.raises(ValueError):
        SpeedProfileSpec((Ramp(-1.0, 2.0, 1.0),))
    prof = SpeedProfileSpec((Ramp(0.0, 10.0, 5.0), Hold(10.0, 5.0)))
    assert abs(prof.distance - 75.0) < 1e-12


def test_profile_overrun():
    path = build_path(PathSpec((Straight(50.0),)))
    with pytest.raises(ProfileOverrunsPath):
        sample_trajectory(path, SpeedProfileSpec((Hold(10.0, 10.0),)), 10.0)


# --------------------------------------------------------------------------- #
# Ground truth kinematics
# --------------------------------------------------------------------------- #

def test_straight_hold_samples():
    path = build_path(PathSpec((Straight(150.0),)))
    gt = sample_trajectory(path, SpeedProfileSpec((Hold(10.0, 10.0),)), 100.0)
    assert len(gt) == 1001
    np.testing.assert_allclose(gt.positions[:, 0], 10.0 * gt.timestamps, atol=1e-9)
    np.testing.assert_allclose(gt.angular_rates, 0.0, atol=1e-12)
    np.testing.assert_allclose(gt.rotations, np.tile(np.eye(3), (1001, 1, 1)), atol=1e-12)


def test_circular_motion():
    r, v = 150.0, 12.0
    path = build_path(PathSpec((Arc(r, 2.0),)))
    gt = sample_trajectory(path, SpeedProfileSpec((Hold(v, 10.0),)), 50.0)
    np.testing.assert_allclose(np.linalg.norm(gt.accelerations, axis=1), v**2 / r, rtol=1e-9)
    np.testing.assert_allclose(gt.angular_rates[:, 2], v / r, rtol=1e-12)


def _kinematic_scenario():
    path = build_path(PathSpec((Straight(30.0), Arc(120.0, 0.8), Straight(100.0))))
    prof = SpeedProfileSpec((Ramp(5.0, 12.0, 4.0), Hold(12.0, 4.0), Ramp(12.0, 8.0, 4.0)))
    return sample_trajectory(path, prof, 1000.0)


def test_finite_difference_velocity_and_acceleration():
    gt = _kinematic_scenario()
    dt = np.diff(gt.timestamps)
    v_fd = (gt.positions[2:] - gt.positions[:-2]) / (dt[1:] + dt[:-1])[:, None]
    v = gt.velocities[1:-1]
    speed = np.linalg.norm(v, axis=1)
    # skip the samples next to profile junctions where acceleration jumps
    err = np.linalg.norm(v_fd - v, axis=1) / speed
    assert np.max(err) < 1e-4
    a_fd = (gt.velocities[2:] - gt.velocities[:-2]) / (dt[1:] + dt[:-1])[:, None]
    a = gt.accelerations[1:-1]
    smooth = np.linalg.norm(gt.accelerations[2:] - gt.accelerations[:-2], axis=1) < 1e-3
    rel = np.linalg.norm(a_fd - a, axis=1)[smooth] / np.maximum(np.linalg.norm(a, axis=1)[smooth], 1e-3)
    assert np.max(rel) < 1e-4


def test_finite_difference_angular_rate():
    gt = _kinematic_scenario()
    dt = np.diff(gt.timestamps)
    yaw = np.unwrap(np.arctan2(gt.rotations[:, 1, 0], gt.rotations[:, 0, 0]))
    w_fd = (yaw[2:] - yaw[:-2]) / (dt[1:] + dt[:-1])
    w = gt.angular_rates[1:-1, 2]
    smooth = np.abs(gt.angular_rates[2:, 2] - gt.angular_rates[:-2, 2]) < 1e-4
    assert np.max(np.abs(w_fd - w)[smooth] / np.maximum(np.abs(w[smooth]), 1e-3)) < 1e-4


def test_speed_matches_profile_and_arc_length_monotone():
    gt = _kinematic_scenario()
    _, v, _ = gt.profile.evaluate(gt.timestamps)
    np.testing.assert_allclose(np.linalg.norm(gt.velocities, axis=1), v, atol=1e-6)
    assert np.all(np.diff(gt.arc_lengths) >= 0)
    assert np.all(np.diff(gt.timestamps) > 0)


# --------------------------------------------------------------------------- #
# IMU
# --------------------------------------------------------------------------- #

def _stationary_gt(rate=300.0):
    path = build_path(PathSpec((Straight(10.0),)))
    return sample_trajectory(path, SpeedProfileSpec((Hold(0.0, 1.0),)), rate)


def test_stationary_imu_measures_gravity_reaction():
    imu = generate_imu(_stationary_gt(), ImuSpec().noiseless())
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-15)
    np.testing.assert_allclose(imu.accel, np.tile([0.0, 0.0, 9.81], (len(imu), 1)), atol=1e-12)


def test_constant_velocity_imu_is_unexciting():
    path = build_path(PathSpec((Straight(200.0),)))
    gt = sample_trajectory(path, SpeedProfileSpec((Hold(14.0, 10.0),)), 300.0)
    imu = generate_imu(gt, ImuSpec().noiseless())
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-15)
    np.testing.assert_allclose(imu.accel - [0.0, 0.0, 9.81], 0.0, atol=1e-12)


@pytest.mark.parametrize("elements,profile", [
    ((Arc(100.0, 2.0),), (Hold(12.0, 10.0),)),
    ((Straight(200.0),), (Ramp(4.0, 16.0, 10.0),)),
])
def test_noiseless_imu_integrates_to_ground_truth(elements, profile):
    # smooth signals: acceleration steps at profile junctions are not resolvable by sampling
    gt = sample_trajectory(build_path(PathSpec(elements)), SpeedProfileSpec(profile), 300.0)
    imu = generate_imu(gt, ImuSpec().noiseless())
    pre = integrate(imu.timestamps, imu.gyro, imu.accel, ImuBias(), NoiseParams())
    R, p, v = predict_state(gt.rotations[0], gt.positions[0], gt.velocities[0], ImuBias(), pre, 9.81)
    assert abs(pre.dt - 10.0) < 1e-9
    assert np.linalg.norm(p - gt.positions[-1]) < 1e-3
    assert np.linalg.norm(v - gt.velocities[-1]) < 1e-3
    np.testing.assert_allclose(R, gt.rotations[-1], atol=1e-9)


def test_bias_random_walk_and_initial_bias():
    gt = _stationary_gt()
    spec = ImuSpec(gyro_noise_density=0.0, accel_noise_density=0.0, gyro_random_walk=1e-3,
                   accel_random_walk=1e-2, initial_gyro_bias=(0.01, 0.0, 0.0),
                   initial_accel_bias=(0.0, 0.2, 0.0))
    imu = generate_imu(gt, spec, np.random.default_rng(3))
    np.testing.assert_allclose(imu.gyro_bias[0], [0.01, 0.0, 0.0])
    np.testing.assert_allclose(imu.accel_bias[0], [0.0, 0.2, 0.0])
    np.testing.assert_allclose(imu.gyro, imu.gyro_bias, atol=1e-15)
    assert np.std(np.diff(imu.accel_bias[:, 0])) == pytest.approx(1e-2 / math.sqrt(300.0), rel=0.1)


def test_imu_rate_must_exceed_twice_camera_rate():
    with pytest.raises(ValueError):
        straight_scenario(imu=ImuSpec(rate_hz=30.0), camera_rate_hz=20.0)


# --------------------------------------------------------------------------- #
# Landmarks and observations
# --------------------------------------------------------------------------- #

def test_landmark_density_count():
    cfg = straight_scenario(length=100.0, seed=4, landmark_density_per_m=1.0)
    path = build_path(cfg.path)
    lms = generate_landmarks(cfg, path, np.random.default_rng(4))
    # the corridor spans 20 m behind the start to max_range_m past the end
    span = path.length + 20.0 + cfg.max_range_m
    assert abs(len(lms) - span) < 4 * math.sqrt(span)
    off = np.abs(lms.positions[:, 1])
    assert np.all((off >= 2.0) & (off <= 20.0))
    h = lms.positions[:, 2]
    assert np.all((h >= -1.0) & (h <= 8.0))


def test_aliasing_row_spacing():
    cfg = straight_scenario(length=100.0, seed=4, aliasing_period_m=1.0)
    path = build_path(cfg.path)
    lms = generate_landmarks(cfg, path)
    row = lms.positions[lms.pattern]
    on_track = row[(row[:, 0] >= 0) & (row[:, 0] < 100.0 - 1e-9)]
    assert len(on_track) == 100
    np.testing.assert_allclose(np.diff(on_track[:, 0]), 1.0, atol=1e-9)
    np.testing.assert_allclose(on_track[:, 1:], 0.0, atol=1e-12)


def test_landmarks_deterministic():
    cfg = straight_scenario(length=100.0, seed=9)
    path = build_path(cfg.path)
    a = generate_landmarks(cfg, path)
    b = generate_landmarks(cfg, path)
    np.testing.assert_array_equal(a.positions, b.positions)


def _noiseless(**kw):
    return straight_scenario(length=60.0, speed=10.0, seed=2, pixel_noise_px=0.0,
                             imu=ImuSpec().noiseless(), **kw)


def test_zero_noise_observations_reproject_exactly():
    sim = simulate(_noiseless())
    log, gt = sim.log, sim.ground_truth
    T_bc0 = log.T_body_cam0
    T_c0c1 = sim.config.true_rig.T_cam0_cam1
    pos = dict(zip(sim.landmarks.ids, sim.landmarks.positions))
    for i in range(0, len(log.obs_frame), 7):
        f = log.obs_frame[i]
        T_wc0 = gt.pose(f) @ T_bc0
        T_cw = inverse(T_wc0) if log.obs_cam[i] == 0 else inverse(T_wc0 @ T_c0c1)
        px = project_camera(log.intrinsics, T_cw.apply(pos[log.obs_landmark[i]]))
        np.testing.assert_allclose(px, log.obs_px[i], atol=1e-9)


def test_zero_noise_stereo_triangulates_true_landmark():
    sim = simulate(_noiseless())
    log, gt = sim.log, sim.ground_truth
    pos = dict(zip(sim.landmarks.ids, sim.landmarks.positions))
    rows = np.nonzero(np.isfinite(log.obs_depth))[0]
    assert len(rows) > 100
    for i in rows[::5]:
        j = i + 1
        assert log.obs_cam[j] == 1 and log.obs_landmark[j] == log.obs_landmark[i]
        p_c0, depth = triangulate_stereo(log.rig, log.intrinsics, log.intrinsics, log.obs_px[i], log.obs_px[j])
        T_wc0 = gt.pose(log.obs_frame[i]) @ log.T_body_cam0
        np.testing.assert_allclose(T_wc0.apply(p_c0), pos[log.obs_landmark[i]], atol=1e-6)
        assert abs(depth - log.obs_depth[i]) < 1e-9


def test_stereo_range_gate():
    sim = simulate(_noiseless())
    d = sim.log.obs_depth[np.isfinite(sim.log.obs_depth)]
    assert np.all(d < 40.0 * 0.31 + 1e-9)


def test_dropout_removes_observations():
    sim = simulate(_noiseless(dropouts=((2.0, 3.0),)))
    t = sim.log.frame_times[sim.log.obs_frame]
    assert not np.any((t >= 2.0) & (t <= 3.0))
    assert np.any(t < 2.0) and np.any(t > 3.0)
    # frames still exist; only their observations are gone
    assert sim.log.n_frames == len(sim.ground_truth)


def test_mask_removes_pixels():
    mask = (500.0, 300.0, 1400.0, 1100.0)
    sim = simulate(straight_scenario(length=60.0, seed=2, mask=mask))
    px = sim.log.obs_px
    inside = (px[:, 0] >= 500) & (px[:, 0] <= 1400) & (px[:, 1] >= 300) & (px[:, 1] <= 1100)
    assert not np.any(inside)


def test_mismatch_fraction_matches_probability():
    cfg = straight_scenario(length=120.0, seed=5, aliasing_period_m=1.0, aliasing_mismatch_prob=0.1)
    sim = simulate(cfg)
    pat = sim.landmarks.ids[sim.landmarks.pattern]
    rows = np.isin(sim.log.obs_true_landmark, pat) & (sim.log.obs_cam == 0)
    n = int(np.sum(rows))
    frac = mismatch_fraction(sim.log, pat)
    assert n > 500
    # the first pattern landmark has no neighbour to swap with, hence the small slack
    assert abs(frac - 0.1) < 4 * math.sqrt(0.1 * 0.9 / n) + 0.01
    wrong = sim.log.obs_landmark[rows] != sim.log.obs_true_landmark[rows]
    assert np.all(np.isin(sim.log.obs_landmark[rows][wrong], pat))


def test_extrinsic_perturbation_only_in_reported_rig():
    base = straight_scenario(length=40.0, seed=1, pixel_noise_px=0.0)
    pert = straight_scenario(length=40.0, seed=1, pixel_noise_px=0.0,
                             extrinsic_rotation_rad=math.radians(0.3))
    a, b = simulate(base).log, simulate(pert).log
    np.testing.assert_array_equal(a.obs_px, b.obs_px)
    assert not b.rig.T_cam0_cam1.is_close(a.rig.T_cam0_cam1, 1e-6)
    assert abs(np.nanmean(a.obs_depth) - np.nanmean(b.obs_depth)) > 1e-3


@pytest.mark.parametrize("B,ref,expected_deg", [(0.31, 0.0, 0.3), (1.2, 0.0, 0.3),
                                                 (1.2, 1.2, 0.3), (0.6, 1.2, 0.15)])
def test_extrinsic_rotation_scaling(B, ref, expected_deg):
    from railodo import so3
    cfg = straight_scenario(length=20.0, seed=1, baseline_m=B, extrinsic_rotation_rad=math.radians(0.3),
                            extrinsic_reference_baseline_m=ref)
    angle = np.linalg.norm(so3.log(cfg.reported_rig.T_cam0_cam1.R))
    assert angle == pytest.approx(math.radians(expected_deg), rel=1e-12)
    assert cfg.true_rig.baseline == B


def test_simulation_is_bit_identical():
    cfg = straight_scenario(length=40.0, seed=11, aliasing_period_m=1.0, aliasing_mismatch_prob=0.2)
    a, b = simulate(cfg).log, simulate(cfg).log
    for name in ("obs_frame", "obs_cam", "obs_landmark", "obs_px", "obs_depth", "frame_times"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.imu.accel.tobytes() == b.imu.accel.tobytes()


def test_seed_is_mandatory():
    with pytest.raises(ValueError):
        ScenarioConfig(seed=None, path=PathSpec((Straight(10.0),)), speed=SpeedProfileSpec((Hold(1.0, 1.0),)))


def test_tracks_reference_existing_frames():
    sim = simulate(straight_scenario(length=40.0, seed=3))
    frames = set(sim.log.frame_ids.tolist())
    for obs in sim.log.tracks().values():
        assert all(f in frames and c in (0, 1) for f, c, _, _ in obs)
