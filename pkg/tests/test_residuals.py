"""Analytic residual Jacobians against central finite differences."""
import numpy as np
import pytest

from railodo import so3
from railodo.errors import BehindCamera, NonAdjacentStates
from railodo.estimator.residuals import (DepthModel, ImuFactorStack, KeyframeState,
                                         depth_residual, depth_residuals, huber, inertial_residual,
                                         inertial_residuals, reprojection_residual)
from railodo.geometry import R_BODY_CAM, CameraIntrinsics, Pose
from railodo.preintegration import ImuBias, NoiseParams, integrate

N_CONFIGS = 100
STEP = 1e-6
TOL = 1e-5
K = CameraIntrinsics.default()


def fd_jacobian(f, n, h=STEP):
    cols = []
    for i in range(n):
        d = np.zeros(n)
        d[i] = h
        cols.append((np.atleast_1d(f(d)) - np.atleast_1d(f(-d))) / (2 * h))
    return np.column_stack(cols)


def rel_err(J, Jfd):
    return np.max(np.abs(J - Jfd)) / max(1.0, np.max(np.abs(Jfd)))


def perturbed(state, delta):
    s = state.copy()
    s.retract(delta)
    return s


def random_state(rng, t=0.0):
    R = so3.exp(rng.normal(scale=1.0, size=3))
    return KeyframeState(t, R, rng.normal(scale=5.0, size=3), rng.normal(scale=3.0, size=3),
                         rng.normal(scale=0.01, size=3), rng.normal(scale=0.1, size=3))


def random_extrinsic(rng):
    return Pose.from_matrix(R_BODY_CAM @ so3.exp(rng.normal(scale=0.05, size=3)),
                            rng.normal(scale=0.5, size=3))


def visible_landmark(rng, state, T_bc, depth_range=(3.0, 60.0)):
    z = rng.uniform(*depth_range)
    pc = np.array([rng.uniform(-0.5, 0.5) * z, rng.uniform(-0.3, 0.3) * z, z])
    pb = T_bc.R @ pc + T_bc.translation
    return state.R @ pb + state.p


def test_reprojection_jacobians_fd():
    rng = np.random.default_rng(1)
    worst_p = worst_l = 0.0
    for _ in range(N_CONFIGS):
        s = random_state(rng)
        T = random_extrinsic(rng)
        lm = visible_landmark(rng, s, T)
        px = np.array([K.cx, K.cy]) + rng.normal(scale=50.0, size=2)
        sig = rng.uniform(0.5, 2.0)
        r, Jp, Jl = reprojection_residual(s, T, K, lm, px, sig)
        Jp_fd = fd_jacobian(lambda d: reprojection_residual(perturbed(s, d), T, K, lm, px, sig)[0], 6)
        Jl_fd = fd_jacobian(lambda d: reprojection_residual(s, T, K, lm + d, px, sig)[0], 3)
        worst_p = max(worst_p, rel_err(Jp, Jp_fd))
        worst_l = max(worst_l, rel_err(Jl, Jl_fd))
    assert worst_p < TOL and worst_l < TOL


def test_depth_jacobians_fd():
    rng = np.random.default_rng(2)
    worst_p = worst_l = 0.0
    for _ in range(N_CONFIGS):
        s = random_state(rng)
        T = random_extrinsic(rng)
        B = rng.uniform(0.3, 1.2)
        lm = visible_landmark(rng, s, T, (3.0, 30.0 * B))
        d = rng.uniform(2.0, 35.0 * B)
        w = rng.uniform(0.5, 2.0)
        out = depth_residual(s, T, lm, d, B, K.fx, weight=w)
        assert out is not None
        r, Jp, Jl = out
        Jp_fd = fd_jacobian(lambda x: depth_residual(perturbed(s, x), T, lm, d, B, K.fx, weight=w)[0], 6)
        Jl_fd = fd_jacobian(lambda x: depth_residual(s, T, lm + x, d, B, K.fx, weight=w)[0], 3)
        worst_p = max(worst_p, rel_err(Jp, Jp_fd))
        worst_l = max(worst_l, rel_err(Jl, Jl_fd))
    assert worst_p < TOL and worst_l < TOL


def random_factor(rng, T=0.1, rate=300.0):
    n = int(round(T * rate)) + 1
    t = np.arange(n) / rate
    w = rng.normal(scale=0.3, size=3) + 0.05 * np.sin(t)[:, None]
    a = rng.normal(scale=1.0, size=3) + [0.0, 0.0, 9.81] + 0.2 * np.cos(t)[:, None]
    lin = ImuBias(rng.normal(scale=0.01, size=3), rng.normal(scale=0.1, size=3))
    return integrate(t, w, a, lin, NoiseParams())


def test_inertial_jacobians_fd():
    rng = np.random.default_rng(3)
    worst_i = worst_j = 0.0
    for _ in range(N_CONFIGS):
        pre = random_factor(rng, T=rng.uniform(0.05, 0.2))
        si = random_state(rng, 0.0)
        sj = random_state(rng, pre.dt)
        # keep the rotation residual away from pi
        sj.R = si.R @ pre.delta_R @ so3.exp(rng.normal(scale=0.3, size=3))
        r, Ji, Jj = inertial_residual(si, sj, pre)
        Ji_fd = fd_jacobian(lambda d: inertial_residual(perturbed(si, d), sj, pre, jacobians=False)[0], 15)
        Jj_fd = fd_jacobian(lambda d: inertial_residual(si, perturbed(sj, d), pre, jacobians=False)[0], 15)
        worst_i = max(worst_i, rel_err(Ji, Ji_fd))
        worst_j = max(worst_j, rel_err(Jj, Jj_fd))
    assert worst_i < TOL and worst_j < TOL


def test_batched_inertial_matches_single():
    rng = np.random.default_rng(4)
    pres = [random_factor(rng) for _ in range(5)]
    sis = [random_state(rng, 0.0) for _ in pres]
    sjs = [random_state(rng, p.dt) for p in pres]
    st = ImuFactorStack.from_factors(pres)

    def stack(states, attr):
        return np.array([getattr(s, attr) for s in states])
    args = [stack(sis, a) for a in ("R", "p", "v", "bg", "ba")] + \
           [stack(sjs, a) for a in ("R", "p", "v", "bg", "ba")]
    r, Ji, Jj = inertial_residuals(*args, st)
    for k, (p, si, sj) in enumerate(zip(pres, sis, sjs)):
        r1, Ji1, Jj1 = inertial_residual(si, sj, p)
        np.testing.assert_allclose(r[k], r1, rtol=1e-10, atol=1e-8)
        np.testing.assert_allclose(Ji[k], Ji1, rtol=1e-10, atol=1e-8)
        np.testing.assert_allclose(Jj[k], Jj1, rtol=1e-10, atol=1e-8)


def test_inertial_residual_zero_on_consistent_states():
    rng = np.random.default_rng(5)
    pre = random_factor(rng)
    si = random_state(rng)
    si.bg, si.ba = pre.bias_lin.gyro.copy(), pre.bias_lin.accel.copy()
    g = np.array([0.0, 0.0, -9.81])
    T = pre.dt
    sj = KeyframeState(T, si.R @ pre.delta_R, si.p + si.v * T + 0.5 * g * T * T + si.R @ pre.delta_p,
                       si.v + g * T + si.R @ pre.delta_v, si.bg.copy(), si.ba.copy())
    r, _, _ = inertial_residual(si, sj, pre)
    assert np.max(np.abs(r)) < 1e-6


def test_non_adjacent_states():
    rng = np.random.default_rng(6)
    pre = random_factor(rng)
    with pytest.raises(NonAdjacentStates):
        inertial_residual(random_state(rng, 0.0), random_state(rng, pre.dt + 0.05), pre)


def test_behind_camera():
    s = KeyframeState(0.0, np.eye(3), np.zeros(3))
    T = Pose.from_matrix(R_BODY_CAM)
    with pytest.raises(BehindCamera):
        reprojection_residual(s, T, K, np.array([-5.0, 0.0, 0.0]), np.array([0.0, 0.0]))


def test_reprojection_zero_at_true_pixel():
    s = KeyframeState(0.0, np.eye(3), np.zeros(3))
    T = Pose.from_matrix(R_BODY_CAM)
    r, _, _ = reprojection_residual(s, T, K, np.array([10.0, 0.0, 0.0]), np.array([K.cx, K.cy]))
    assert np.allclose(r, 0.0)


def test_depth_gating():
    s = KeyframeState(0.0, np.eye(3), np.zeros(3))
    T = Pose.from_matrix(R_BODY_CAM)
    lm = np.array([20.0, 0.0, 0.0])
    assert depth_residual(s, T, lm, 12.5, 0.31, K.fx) is None           # 40 * 0.31 = 12.4 m
    r, _, _ = depth_residual(s, T, lm, 12.3, 0.31, K.fx)
    sigma = 12.3**2 * np.sqrt(2) / (K.fx * 0.31)
    assert r == pytest.approx((12.3 - 20.0) / sigma)
    with pytest.raises(ValueError):
        depth_residual(s, T, lm, -1.0, 0.31, K.fx)


def test_depth_weight_scales_residual():
    m1, m4 = DepthModel(K.fx, 0.5), DepthModel(K.fx, 0.5, weight=4.0)
    args = (np.eye(3)[None], np.zeros((1, 3)), R_BODY_CAM, np.zeros(3), np.array([[8.0, 0.0, 0.0]]),
            np.array([7.0]))
    r1, e1, _, _ = depth_residuals(*args, m1)
    r4, e4, _, _ = depth_residuals(*args, m4)
    assert r4[0] == pytest.approx(2.0 * r1[0])
    assert e4[0] == pytest.approx(e1[0])


def test_huber():
    cost, w = huber(np.array([1.0, 16.0]), 2.0)
    np.testing.assert_allclose(cost, [1.0, 2 * 2 * 4 - 4])
    np.testing.assert_allclose(w, [1.0, 0.5])
