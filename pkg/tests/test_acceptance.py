"""End-to-end acceptance checks. Each test records one PASS/FAIL line, printed at the end of the run.

The scenario-level checks are slow (criterion 1 alone takes several minutes on one core).
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from railodo import so3
from railodo.config import load_estimator, load_manifest, load_scenario
from railodo.estimator import EstimatorConfig, run_estimator
from railodo.estimator.residuals import depth_residual, inertial_residual, reprojection_residual
from railodo.evaluation import SegmentError, Trajectory, aggregate, evaluate, merge_reports
from railodo.geometry import CameraIntrinsics, Pose, StereoRig, triangulate_stereo
from railodo.preintegration import integrate
from railodo.simulator import simulate
from railodo.sweep import run_sweep

from .test_preintegration import fine_integration, relative_errors, window
from .test_residuals import (fd_jacobian, perturbed, random_extrinsic, random_factor,
                             random_state, rel_err, visible_landmark)

pytestmark = pytest.mark.acceptance

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "railodo" / "scenarios"
SEEDS = (1, 2, 3, 4, 5)
ACCEPTANCE_LINES = []


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def scenario(name, **overrides):
    return load_scenario(SCENARIOS / name, {k.replace("__", "."): str(v) for k, v in overrides.items()})


def run(sim, mode, lengths, mask=None):
    res = run_estimator(sim.log, EstimatorConfig(mode=mode, mask=mask))
    return evaluate(res.trajectory, sim.ground_truth.to_trajectory(), lengths)


# --------------------------------------------------------------------------- #
# 1. trajectory2-like: mono-inertial vs stereo-inertial
# --------------------------------------------------------------------------- #

def test_c1_mono_vs_stereo_inertial():
    t0 = time.perf_counter()
    reports = {"stereo-inertial": [], "mono-inertial": []}
    for seed in SEEDS:
        sim = simulate(scenario("trajectory2-like.cfg", seed=seed))
        for mode in reports:
            reports[mode].append(run(sim, mode, (50.0,)))
    elapsed = time.perf_counter() - t0
    si = merge_reports(reports["stereo-inertial"]).stats[50.0].median_distance
    mi = merge_reports(reports["mono-inertial"]).stats[50.0].median_distance
    ok = mi >= 10 * si and si <= 3.0 and elapsed < 600
    assert record(1, ok, f"50 m median mono-inertial {mi:.2f}% vs stereo-inertial {si:.3f}% "
                         f"(ratio {mi / si:.1f}), {elapsed:.0f} s")


# --------------------------------------------------------------------------- #
# 2. Noiseless 200 m stereo-inertial
# --------------------------------------------------------------------------- #

def test_c2_noiseless_accuracy():
    t0 = time.perf_counter()
    sim = simulate(scenario("noiseless-200m.cfg"))
    s = run(sim, "stereo-inertial", (10.0,)).stats[10.0]
    elapsed = time.perf_counter() - t0
    ok = s.median_distance < 0.1 and s.median_heading < 1e-3 and elapsed < 60
    assert record(2, ok, f"10 m median {s.median_distance:.2e}% / {s.median_heading:.2e} deg/m, "
                         f"{elapsed:.1f} s")


# --------------------------------------------------------------------------- #
# 3. Preintegration against 100x finer integration
# --------------------------------------------------------------------------- #

def test_c3_preintegration_fine_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10):
        t, w, a, (gyro, accel, t0, T) = window(rng)
        pre = integrate(t, w, a)
        R, v, p = fine_integration(gyro, accel, t0, T, 100 * (len(t) - 1))
        worst = max(worst, *relative_errors(pre, R, v, p))
    assert record(3, worst < 1e-6, f"worst relative error {worst:.2e} over 10 windows of 0.5 s")


# --------------------------------------------------------------------------- #
# 4. Analytic Jacobians against central differences
# --------------------------------------------------------------------------- #

def test_c4_jacobians():
    rng = np.random.default_rng(99)
    K = CameraIntrinsics.default()
    worst = {"reprojection": 0.0, "depth": 0.0, "inertial": 0.0}
    for _ in range(100):
        s, T = random_state(rng), random_extrinsic(rng)
        lm = visible_landmark(rng, s, T)
        px = np.array([K.cx, K.cy]) + rng.normal(scale=50.0, size=2)
        _, Jp, Jl = reprojection_residual(s, T, K, lm, px, 1.0)
        e = max(rel_err(Jp, fd_jacobian(lambda d: reprojection_residual(perturbed(s, d), T, K, lm, px, 1.0)[0], 6)),
                rel_err(Jl, fd_jacobian(lambda d: reprojection_residual(s, T, K, lm + d, px, 1.0)[0], 3)))
        worst["reprojection"] = max(worst["reprojection"], e)

        B = rng.uniform(0.3, 1.2)
        lm = visible_landmark(rng, s, T, (3.0, 30.0 * B))
        depth = rng.uniform(2.0, 35.0 * B)
        _, Jp, Jl = depth_residual(s, T, lm, depth, B, K.fx)
        e = max(rel_err(Jp, fd_jacobian(lambda d: depth_residual(perturbed(s, d), T, lm, depth, B, K.fx)[0], 6)),
                rel_err(Jl, fd_jacobian(lambda d: depth_residual(s, T, lm + d, depth, B, K.fx)[0], 3)))
        worst["depth"] = max(worst["depth"], e)

        pre = random_factor(rng, T=rng.uniform(0.05, 0.2))
        si, sj = random_state(rng, 0.0), random_state(rng, pre.dt)
        sj.R = si.R @ pre.delta_R @ so3.exp(rng.normal(scale=0.3, size=3))
        _, Ji, Jj = inertial_residual(si, sj, pre)
        e = max(rel_err(Ji, fd_jacobian(lambda d: inertial_residual(perturbed(si, d), sj, pre, jacobians=False)[0], 15)),
                rel_err(Jj, fd_jacobian(lambda d: inertial_residual(si, perturbed(sj, d), pre, jacobians=False)[0], 15)))
        worst["inertial"] = max(worst["inertial"], e)
    ok = max(worst.values()) < 1e-5
    assert record(4, ok, "worst relative error over 100 configurations: "
                  + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# --------------------------------------------------------------------------- #
# 5. Evaluation oracles
# --------------------------------------------------------------------------- #

def _straight(length=10.0, n=101):
    x = np.linspace(0.0, length, n)
    return Trajectory.from_rotations(np.arange(n) * 0.01, np.column_stack([x, 0 * x, 0 * x]),
                                     np.tile(np.eye(3), (n, 1, 1)))


def _curve(n=300, radius=60.0):
    t = np.arange(n) * 0.05
    yaw = 10.0 * t / radius
    pos = np.column_stack([radius * np.sin(yaw), radius * (1 - np.cos(yaw)), 0.2 * np.sin(t)])
    return Trajectory.from_rotations(t, pos, np.array([so3.rot_z(y) for y in yaw]))


def test_c5_evaluation_oracles():
    gt = _straight()
    pos = gt.positions.copy()
    pos[-1, 1] += 0.5
    endpoint = evaluate(Trajectory.from_rotations(gt.timestamps, pos, gt.rotations), gt,
                        (10.0,)).segments[10.0][0].distance_pct

    s = aggregate([SegmentError(0.0, 10.0, d, 0.0) for d in (1.0, 2.0, 3.0)])

    curve = _curve()
    same = evaluate(curve, curve, (10.0, 50.0))
    zero = max(e.distance_pct + e.heading_degpm for L in same.segments for e in same.segments[L])

    rng = np.random.default_rng(5)
    noisy = Trajectory.from_rotations(
        curve.timestamps, curve.positions + np.cumsum(rng.normal(scale=0.01, size=curve.positions.shape), 0),
        np.array([R @ so3.exp(rng.normal(scale=1e-3, size=3)) for R in curve.rotations]))
    moved = noisy.transformed(Pose(np.array([0.3, -0.2, 0.5, 0.8]), np.array([100.0, -40.0, 3.0])))
    a, b = evaluate(noisy, curve, (10.0,)).segments[10.0], evaluate(moved, curve, (10.0,)).segments[10.0]
    shift = max(max(abs(x.distance_pct - y.distance_pct), abs(x.heading_degpm - y.heading_degpm))
                for x, y in zip(a, b))

    ok = (abs(endpoint - 5.0) < 1e-9 and abs(s.median_distance - 2.0) < 1e-12
          and abs(s.rmse_distance - 2.1602) < 1e-4 and zero < 1e-9 and shift < 1e-9)
    assert record(5, ok, f"endpoint {endpoint:.9f}%, median {s.median_distance} rmse "
                         f"{s.rmse_distance:.4f}, identity {zero:.1e}, rigid shift {shift:.1e}")


# --------------------------------------------------------------------------- #
# 6. Stereo depth-noise law
# --------------------------------------------------------------------------- #

def _depth_std(B, d, n, rng, sigma=1.0):
    K = CameraIntrinsics.default()
    rig = StereoRig.fronto_parallel(B)
    x, y = 1.0, 0.5
    u0, u1, v = K.fx * x / d + K.cx, K.fx * (x - B) / d + K.cx, K.fy * y / d + K.cy
    noise = rng.normal(scale=sigma, size=(n, 2))
    z = [triangulate_stereo(rig, K, K, (u0 + e0, v), (u1 + e1, v))[1] for e0, e1 in noise]
    return float(np.std(z))


def test_c6_depth_noise_law():
    rng = np.random.default_rng(6)
    fx, sigma = CameraIntrinsics.default().fx, 1.0
    depths = (5.0, 10.0, 20.0, 30.0, 45.0, 60.0)
    law_ratio, halving = [], []
    for d in depths:
        wide = _depth_std(1.20, d, 5000, rng)
        narrow = _depth_std(0.60, d, 5000, rng)
        law_ratio.append(wide / (d * d * sigma * math.sqrt(2.0) / (fx * 1.20)))
        halving.append(wide / narrow / 0.5)
    worst_law = max(abs(r - 1) for r in law_ratio)
    worst_half = max(abs(r - 1) for r in halving)
    ok = worst_law < 0.2 and worst_half < 0.2
    assert record(6, ok, f"5-60 m at B=1.20: worst deviation from law {worst_law:.1%}; "
                         f"B 0.60->1.20 halving off by at most {worst_half:.1%}")


# --------------------------------------------------------------------------- #
# 7. Baseline vs extrinsic error
# --------------------------------------------------------------------------- #

def _baseline_errors(**overrides):
    out = []
    for seed in SEEDS:
        row = []
        for B in (0.31, 1.20):
            sim = simulate(scenario("baseline.cfg", seed=seed, stereo__baseline_m=B, **overrides))
            row.append(run(sim, "stereo-inertial", (10.0,)).stats[10.0].median_distance)
        out.append(tuple(row))
    return out


def _fmt(rows):
    return ", ".join(f"{a:.2f}/{b:.2f}" for a, b in rows)


def test_c7_wider_baseline_wins_without_extrinsic_error():
    rows = _baseline_errors()
    wins = sum(b <= a for a, b in rows)
    assert record("7a", wins == 5, f"zero extrinsic error, B=1.20 at least as good on {wins}/5 "
                                   f"seeds (10 m median B0.31/B1.20: {_fmt(rows)})")


def test_c7_ordering_reverses_with_baseline_dependent_extrinsic_error():
    # 0.3 deg at B=1.20, scaled linearly with baseline (rig flex grows with the lever arm)
    rows = _baseline_errors(extrinsic__rotation_rad=math.radians(0.3),
                            extrinsic__reference_baseline_m=1.20)
    wins = sum(a < b for a, b in rows)
    assert record("7b", wins == 5, f"0.3 deg flex-scaled rotation, B=0.31 better on {wins}/5 "
                                   f"seeds ({_fmt(rows)})")


@pytest.mark.xfail(strict=True, reason="a fixed rotation biases disparity by the same pixels at "
                                       "every baseline, so the wider rig keeps the smaller error")
def test_c7_ordering_reverses_with_fixed_extrinsic_error():
    rows = _baseline_errors(extrinsic__rotation_rad=math.radians(0.3))
    wins = sum(a < b for a, b in rows)
    record("7c", wins == 5, f"0.3 deg fixed rotation at both baselines, B=0.31 better on "
                            f"{wins}/5 seeds ({_fmt(rows)}); expected failure")
    assert wins == 5


# --------------------------------------------------------------------------- #
# 8. Aliasing
# --------------------------------------------------------------------------- #

def test_c8_aliasing():
    mask = load_estimator(SCENARIOS / "aliasing-mask.cfg").mask
    inflation_ok, lines = 0, []
    plain, masked = [], []
    for seed in SEEDS:
        clean = simulate(scenario("aliasing.cfg", seed=seed, aliasing__mismatch_prob=0))
        alias = simulate(scenario("aliasing.cfg", seed=seed))
        err = {}
        for mode in ("stereo", "stereo-inertial"):
            err[mode] = (run(clean, mode, (10.0,)).stats[10.0].median_distance,
                         run(alias, mode, (10.0,)))
        rep_masked = run(alias, "stereo", (10.0,), mask)
        plain.append(err["stereo"][1])
        masked.append(rep_masked)
        f_s = err["stereo"][1].stats[10.0].median_distance / err["stereo"][0]
        f_si = err["stereo-inertial"][1].stats[10.0].median_distance / err["stereo-inertial"][0]
        inflation_ok += f_s >= f_si
        lines.append(f"seed {seed}: inflation stereo x{f_s:.2f} vs stereo-inertial x{f_si:.2f}, "
                     f"stereo masked {rep_masked.stats[10.0].median_distance:.2f}% vs "
                     f"{err['stereo'][1].stats[10.0].median_distance:.2f}%")
    pooled_plain = merge_reports(plain).stats[10.0].median_distance
    pooled_masked = merge_reports(masked).stats[10.0].median_distance
    for line in lines:
        print(line)
    ok = inflation_ok == 5 and pooled_masked < pooled_plain
    assert record(8, ok, f"inflation ordering on {inflation_ok}/5 seeds; pooled stereo-only 10 m "
                         f"median {pooled_plain:.2f}% -> {pooled_masked:.2f}% with mask")


# --------------------------------------------------------------------------- #
# 9. Reproducible sweep
# --------------------------------------------------------------------------- #

def test_c9_sweep_byte_identical(tmp_path):
    (tmp_path / "s.cfg").write_text("seed = 1\npath = straight 40\nspeed = hold 10 3.5\n"
                                    "[camera]\nrate_hz = 10\n")
    (tmp_path / "m.cfg").write_text(
        "name = repeat\nscenario = s.cfg\nout = a\nseeds = 1, 2\n"
        "modes = stereo-inertial, mono-inertial, stereo\nbaselines = 0.31, 1.2\nsegment_lengths = 10\n")
    outputs = []
    for name in ("a", "b"):
        m = load_manifest(tmp_path / "m.cfg")
        m.out = tmp_path / name
        run_sweep(m, workers=1)
        outputs.append({p.relative_to(m.out).as_posix(): p.read_bytes()
                        for p in sorted(m.out.rglob("*")) if p.is_file()})
    same = outputs[0] == outputs[1] and len(outputs[0]) > 0
    assert record(9, same, f"{len(outputs[0])} output files compared, "
                           f"{'identical' if same else 'different'}")
