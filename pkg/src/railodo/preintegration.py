"""IMU preintegration between keyframes.

Midpoint integration of bias-corrected samples. Gravity is kept out of the
deltas and injected at prediction time. The covariance is over
``(dtheta, dv, dp)`` with ``dtheta`` a right perturbation of ``delta_R``.
Bias Jacobians are the exact first-order derivatives of the discrete
recursion, so first-order bias correction errors are second order in the
bias change.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import EmptyWindow, NonMonotonicTimestamps


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        g = np.asarray(self.gyro, dtype=float).reshape(3)
        a = np.asarray(self.accel, dtype=float).reshape(3)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
            raise ValueError("bias must be finite")
        if np.linalg.norm(g) >= 1.0 or np.linalg.norm(a) >= 1.0:
            raise ValueError("bias magnitude out of sanity bound")
        object.__setattr__(self, "gyro", g)
        object.__setattr__(self, "accel", a)

    def vector(self):
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, v):
        return cls(v[:3], v[3:])


@dataclass(frozen=True)
class NoiseParams:
    gyro_noise_density: float = 2e-4
    accel_noise_density: float = 2e-3
    gyro_random_walk: float = 4e-6
    accel_random_walk: float = 4e-5

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.gyro_noise_density, spec.accel_noise_density,
                   spec.gyro_random_walk, spec.accel_random_walk)


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    dt: float
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    covariance: np.ndarray       # 9x9 over (theta, v, p)
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    bias_lin: ImuBias
    n_samples: int
    noise: NoiseParams = NoiseParams()
    # raw samples kept so the factor can be re-integrated at a new bias
    timestamps: np.ndarray = field(default=None, repr=False)
    gyro: np.ndarray = field(default=None, repr=False)
    accel: np.ndarray = field(default=None, repr=False)

    def reintegrate(self, bias: ImuBias) -> "PreintegratedImu":
        return integrate(self.timestamps, self.gyro, self.accel, bias, self.noise)

    def sqrt_information(self):
        """Upper-triangular ``L`` with ``L.T @ L = inv(covariance)``."""
        return _sqrt_info(self.covariance)


def _sqrt_info(cov):
    info = np.linalg.inv(cov)
    info = 0.5 * (info + info.T)
    return np.linalg.cholesky(info).T


def integrate(timestamps, gyro, accel, bias_lin: ImuBias = ImuBias(),
              noise: NoiseParams = NoiseParams(), cov_floor=1e-18) -> PreintegratedImu:
    """Preintegrate samples ``(t_k, gyro_k, accel_k)`` spanning one keyframe interval."""
    t = np.asarray(timestamps, dtype=float)
    w = np.asarray(gyro, dtype=float).reshape(-1, 3)
    a = np.asarray(accel, dtype=float).reshape(-1, 3)
    if len(t) < 2:
        raise EmptyWindow("need at least two IMU samples")
    dts = np.diff(t)
    if np.any(dts <= 0):
        raise NonMonotonicTimestamps("IMU timestamps must be strictly increasing")
    bg, ba = bias_lin.gyro, bias_lin.accel
    n = len(dts)
    h = dts
    h_col = h[:, None]
    h3 = h[:, None, None]

    # per-step quantities that do not depend on the running deltas
    wb = w - bg
    w_int = 0.5 * (wb[:-1] + wb[1:])
    if n >= 3:
        # cubic through the neighbouring samples where the grid is locally uniform
        k = np.arange(1, n - 1)
        uni = (np.abs(dts[k - 1] - dts[k]) < 1e-9 * dts[k]) & (np.abs(dts[k + 1] - dts[k]) < 1e-9 * dts[k])
        k = k[uni]
        w_int[k] = (13.0 * (w[k] + w[k + 1]) - w[k - 1] - w[k + 2]) / 24.0 - bg
    # rotation increment with the coning term of a linearly varying rate
    theta = w_int * h_col + (h_col * h_col / 12.0) * np.cross(wb[:-1], wb[1:])
    dtheta_dbg = (-h3 * np.eye(3) + (h3 * h3 / 12.0) * (so3.skew_batch(wb[1:]) - so3.skew_batch(wb[:-1])))
    step = so3.exp_batch(theta)
    Jr = so3.right_jacobian_batch(theta)
    stepT = np.transpose(step, (0, 2, 1))
    Jr_dth = Jr @ dtheta_dbg
    ab = a - ba
    S0 = so3.skew_batch(ab[:-1])
    S1 = so3.skew_batch(ab[1:])

    # rotation chain and its gyro-bias Jacobian (the only truly sequential parts)
    Rs = np.empty((n + 1, 3, 3))
    JR = np.empty((n + 1, 3, 3))
    Rs[0] = np.eye(3)
    JR[0] = 0.0
    for k in range(n):
        R1 = Rs[k] @ step[k]
        Rs[k + 1] = so3.normalize(R1) if (k % 64 == 63) else R1
        JR[k + 1] = stepT[k] @ JR[k] + Jr_dth[k]
    R0s, R1s = Rs[:-1], Rs[1:]

    # velocity and position, exact for an acceleration varying linearly across the step
    A0 = (R0s @ ab[:-1, :, None])[:, :, 0]
    A1 = (R1s @ ab[1:, :, None])[:, :, 0]
    dv_inc = 0.5 * (A0 + A1) * h_col
    v_before = np.concatenate([np.zeros((1, 3)), np.cumsum(dv_inc, axis=0)[:-1]])
    dv = dv_inc.sum(axis=0)
    dp = np.sum(v_before * h_col + (2.0 * A0 + A1) * (h_col * h_col / 6.0), axis=0)

    # bias Jacobians, exact for the recursion above
    dA0_bg = -R0s @ S0 @ JR[:-1]
    dA1_bg = -R1s @ S1 @ JR[1:]
    Jv_bg_inc = 0.5 * (dA0_bg + dA1_bg) * h3
    Jv_ba_inc = -0.5 * (R0s + R1s) * h3
    Jv_bg_before = np.concatenate([np.zeros((1, 3, 3)), np.cumsum(Jv_bg_inc, axis=0)[:-1]])
    Jv_ba_before = np.concatenate([np.zeros((1, 3, 3)), np.cumsum(Jv_ba_inc, axis=0)[:-1]])
    Jp_bg = np.sum(Jv_bg_before * h3 + (2.0 * dA0_bg + dA1_bg) * (h3 * h3 / 6.0), axis=0)
    Jp_ba = np.sum(Jv_ba_before * h3 - (2.0 * R0s + R1s) * (h3 * h3 / 6.0), axis=0)
    Jv_bg = Jv_bg_inc.sum(axis=0)
    Jv_ba = Jv_ba_inc.sum(axis=0)
    JR_bg = JR[-1]

    # covariance: gyro noise enters through theta, accel noise through both endpoints
    dA0_th = -R0s @ S0
    dA1_th = -R1s @ S1 @ stepT
    dA1_ng = (R1s @ S1 @ Jr) * h3
    A = np.tile(np.eye(9), (n, 1, 1))
    A[:, 0:3, 0:3] = stepT
    A[:, 3:6, 0:3] = 0.5 * (dA0_th + dA1_th) * h3
    A[:, 6:9, 0:3] = (2.0 * dA0_th + dA1_th) * (h3 * h3 / 6.0)
    A[:, 6:9, 3:6] = np.eye(3) * h3
    B = np.zeros((n, 9, 6))
    B[:, 0:3, 0:3] = -Jr * h3
    B[:, 3:6, 0:3] = 0.5 * dA1_ng * h3
    B[:, 6:9, 0:3] = dA1_ng * (h3 * h3 / 6.0)
    B[:, 3:6, 3:6] = 0.5 * (R0s + R1s) * h3
    B[:, 6:9, 3:6] = (2.0 * R0s + R1s) * (h3 * h3 / 6.0)
    q = np.concatenate([np.repeat(noise.gyro_noise_density**2 / h_col, 3, axis=1),
                        np.repeat(noise.accel_noise_density**2 / h_col, 3, axis=1)], axis=1)
    Q = (B * q[:, None, :]) @ np.transpose(B, (0, 2, 1))
    cov = np.zeros((9, 9))
    for k in range(n):
        cov = A[k] @ cov @ A[k].T + Q[k]
    dR = Rs[-1]

    cov = 0.5 * (cov + cov.T) + cov_floor * np.eye(9)
    return PreintegratedImu(
        dt=float(t[-1] - t[0]), delta_R=dR, delta_v=dv, delta_p=dp, covariance=cov,
        J_R_bg=JR_bg, J_v_bg=Jv_bg, J_v_ba=Jv_ba, J_p_bg=Jp_bg, J_p_ba=Jp_ba,
        bias_lin=bias_lin, n_samples=len(t), noise=noise,
        timestamps=t.copy(), gyro=w.copy(), accel=a.copy())


def correct_bias(pre: PreintegratedImu, new_bias: ImuBias):
    """First-order update of the deltas to a new bias estimate.

    Accurate while the bias change stays small (well under 0.05); the error
    grows quadratically with the change.
    """
    dbg = new_bias.gyro - pre.bias_lin.gyro
    dba = new_bias.accel - pre.bias_lin.accel
    dR = pre.delta_R @ so3.exp(pre.J_R_bg @ dbg)
    dv = pre.delta_v + pre.J_v_bg @ dbg + pre.J_v_ba @ dba
    dp = pre.delta_p + pre.J_p_bg @ dbg + pre.J_p_ba @ dba
    return dR, dv, dp


def predict_state(R_i, p_i, v_i, bias: ImuBias, pre: PreintegratedImu, gravity=9.81):
    """Predicted (R_j, p_j, v_j) from state i; ``gravity`` is the magnitude along -z."""
    g = np.array([0.0, 0.0, -gravity])
    dR, dv, dp = correct_bias(pre, bias)
    T = pre.dt
    R_j = R_i @ dR
    v_j = v_i + g * T + R_i @ dv
    p_j = p_i + v_i * T + 0.5 * g * T * T + R_i @ dp
    return R_j, p_j, v_j


def samples_between(times, gyro, accel, t0, t1):
    """IMU samples covering ``[t0, t1]``, linearly interpolated at the ends."""
    times = np.asarray(times)
    i0 = np.searchsorted(times, t0, side="right")
    i1 = np.searchsorted(times, t1, side="left")
    inner = slice(i0, i1)
    t = [t0]
    g = [_interp(times, gyro, t0)]
    a = [_interp(times, accel, t0)]
    t.extend(times[inner])
    g.extend(gyro[inner])
    a.extend(accel[inner])
    t.append(t1)
    g.append(_interp(times, gyro, t1))
    a.append(_interp(times, accel, t1))
    t = np.asarray(t)
    g = np.asarray(g)
    a = np.asarray(a)
    # drop samples that coincide with the interpolated ends
    keep = np.concatenate([[True], np.diff(t) > 1e-9])
    if not keep[-1]:
        keep[-1] = True
        keep[-2] = False
    return t[keep], g[keep], a[keep]


def _interp(times, values, t):
    j = np.searchsorted(times, t)
    if j < len(times) and abs(times[j] - t) < 1e-9:
        return values[j]
    if j > 0 and abs(times[j - 1] - t) < 1e-9:
        return values[j - 1]
    j = int(np.clip(j, 1, len(times) - 1))
    w = (t - times[j - 1]) / (times[j] - times[j - 1])
    return (1 - w) * values[j - 1] + w * values[j]
