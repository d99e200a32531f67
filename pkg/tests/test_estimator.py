"""End-to-end behaviour of the sliding-window estimator on short simulated runs."""
import dataclasses

import numpy as np
import pytest

from railodo.errors import InsufficientObservations
from railodo.estimator import EstimatorConfig, FrameObservations, apply_mask, run_estimator
from railodo.evaluation import evaluate
from railodo.simulator import ImuSpec, simulate, straight_scenario


def median_error(res, sim, L=10.0):
    rep = evaluate(res.trajectory, sim.ground_truth.to_trajectory(), (L,))
    return rep.stats[L].median_distance, rep.stats[L].median_heading


@pytest.fixture(scope="module")
def noiseless_sim():
    return simulate(straight_scenario(length=40.0, seed=1, imu=ImuSpec().noiseless(),
                                      pixel_noise_px=0.0))


@pytest.fixture(scope="module")
def noisy_sim():
    return simulate(straight_scenario(length=40.0, seed=2))


@pytest.mark.parametrize("mode", ["stereo-inertial", "stereo", "mono-inertial"])
def test_noiseless_is_accurate(noiseless_sim, mode):
    res = run_estimator(noiseless_sim.log, EstimatorConfig(mode=mode))
    d, h = median_error(res, noiseless_sim)
    assert d < 0.1 and h < 1e-3
    assert len(res.timestamps) == noiseless_sim.log.n_frames


def test_every_frame_is_output_in_order(noisy_sim):
    res = run_estimator(noisy_sim.log, EstimatorConfig())
    np.testing.assert_array_equal(res.timestamps, noisy_sim.log.frame_times)
    assert np.allclose(res.positions[0], 0.0) and np.allclose(res.rotations[0], np.eye(3))
    assert all(d.window <= 10 for d in res.diagnostics)


def test_depth_gating_counts(noisy_sim):
    res = run_estimator(noisy_sim.log, EstimatorConfig(window_size=5))
    t = res.totals()
    assert t["depth_residuals"] > 0 and t["depth_gated"] > 0
    log = noisy_sim.log
    d = log.obs_depth[np.isfinite(log.obs_depth)]
    assert np.any(d >= 40 * 0.31) and np.any(d < 40 * 0.31)


def test_depth_weight_zero_disables_depth(noisy_sim):
    res = run_estimator(noisy_sim.log, EstimatorConfig(window_size=5, depth_weight=0.0))
    assert res.totals()["depth_residuals"] == 0


def test_mono_inertial_uses_one_camera_without_depth(noisy_sim):
    res = run_estimator(noisy_sim.log, EstimatorConfig(mode="mono-inertial", window_size=5))
    assert res.totals()["depth_residuals"] == 0


def test_dropout_coasts_in_inertial_mode():
    sim = simulate(straight_scenario(length=40.0, seed=3, dropouts=((1.5, 2.0),)))
    res = run_estimator(sim.log, EstimatorConfig())
    gap_times = [d.timestamp for d in res.diagnostics if d.gap]
    assert gap_times and all(1.5 - 1e-9 <= t <= 2.0 + 0.11 for t in gap_times)
    assert len(res.timestamps) == sim.log.n_frames
    d, _ = median_error(res, sim)
    assert d < 3.0


def test_dropout_restarts_stereo_only():
    sim = simulate(straight_scenario(length=40.0, seed=3, dropouts=((1.5, 2.0),)))
    res = run_estimator(sim.log, EstimatorConfig(mode="stereo"))
    assert res.gaps
    assert len(res.timestamps) == sim.log.n_frames
    assert np.all(np.isfinite(res.positions))


def test_batch_refinement_runs(noisy_sim):
    res = run_estimator(noisy_sim.log, EstimatorConfig(batch=True))
    d, _ = median_error(res, noisy_sim)
    assert len(res.timestamps) == noisy_sim.log.n_frames and d < 3.0


def test_single_frame_log_is_rejected(noisy_sim):
    log = dataclasses.replace(noisy_sim.log, frame_times=noisy_sim.log.frame_times[:1],
                              frame_ids=noisy_sim.log.frame_ids[:1])
    with pytest.raises(InsufficientObservations):
        run_estimator(log, EstimatorConfig())


def test_apply_mask_drops_landmark_in_both_cameras():
    obs = FrameObservations(np.array([1, 1, 2, 2]), np.array([0, 1, 0, 1]),
                            np.array([[10.0, 10.0], [500.0, 10.0], [600.0, 600.0], [590.0, 600.0]]),
                            np.array([5.0, np.nan, 6.0, np.nan]))
    out = apply_mask(obs, (400.0, 0.0, 520.0, 50.0))
    assert out.landmark.tolist() == [2, 2]
    assert apply_mask(obs, None) is obs


def test_deterministic(noisy_sim):
    a = run_estimator(noisy_sim.log, EstimatorConfig(window_size=5))
    b = run_estimator(noisy_sim.log, EstimatorConfig(window_size=5))
    np.testing.assert_array_equal(a.positions, b.positions)
