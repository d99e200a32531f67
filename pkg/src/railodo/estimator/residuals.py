"""Residual families of the window problem with analytic Jacobians.

Keyframe error state, 15 dims: ``[dtheta, dp, dv, dbg, dba]`` where
``R <- R @ exp(dtheta)`` and the rest are additive (``dp`` in world frame).
Pose-only Jacobians use the first six columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import so3
from ..errors import BehindCamera, NonAdjacentStates
from ..geometry import MIN_DEPTH, CameraIntrinsics, Pose, stereo_depth_sigma
from ..preintegration import ImuBias, PreintegratedImu

STATE_DIM = 15
POSE_DIM = 6


@dataclass
class KeyframeState:
    timestamp: float
    R: np.ndarray                      # world-from-body rotation
    p: np.ndarray                      # world position
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_id: int = -1

    @property
    def pose(self) -> Pose:
        return Pose.from_matrix(self.R, self.p)

    @property
    def bias(self) -> ImuBias:
        return ImuBias(self.bg, self.ba)

    @classmethod
    def from_pose(cls, timestamp, pose: Pose, v=None, bias: ImuBias | None = None, frame_id=-1):
        bias = ImuBias() if bias is None else bias
        return cls(timestamp, pose.R.copy(), pose.translation.copy(),
                   np.zeros(3) if v is None else np.asarray(v, float).copy(),
                   bias.gyro.copy(), bias.accel.copy(), frame_id)

    def copy(self):
        return KeyframeState(self.timestamp, self.R.copy(), self.p.copy(), self.v.copy(),
                             self.bg.copy(), self.ba.copy(), self.frame_id)

    def retract(self, delta):
        """Apply a 15- (or 6-) dim error-state step in place."""
        self.R = self.R @ so3.exp(delta[0:3])
        self.p = self.p + delta[3:6]
        if len(delta) > 6:
            self.v = self.v + delta[6:9]
            self.bg = self.bg + delta[9:12]
            self.ba = self.ba + delta[12:15]

    def boxminus(self, other: "KeyframeState"):
        """Error state taking ``other`` to ``self``."""
        return np.concatenate([so3.log(other.R.T @ self.R), self.p - other.p, self.v - other.v,
                               self.bg - other.bg, self.ba - other.ba])


# --------------------------------------------------------------------------- #
# Reprojection
# --------------------------------------------------------------------------- #

def camera_points(R_wb, p_wb, R_bc, t_bc, landmarks):
    """Landmarks in the camera frame. ``R_wb``/``p_wb`` are per-observation stacks."""
    pb = np.einsum("nji,nj->ni", R_wb, landmarks - p_wb)
    pc = (pb - t_bc) @ R_bc
    return pb, pc


def reprojection_residuals(R_wb, p_wb, R_bc, t_bc, K: CameraIntrinsics, landmarks, px, sigma,
                           jacobians=True):
    """Whitened pixel residuals ``(project - observed) / sigma`` for n observations.

    Returns ``r (n,2)``, ``J_pose (n,2,6)``, ``J_lm (n,2,3)`` and a validity mask
    that is False where the landmark is not in front of the camera.
    """
    pb, pc = camera_points(R_wb, p_wb, R_bc, t_bc, landmarks)
    z = pc[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    u = K.fx * pc[:, 0] / zs + K.cx
    v = K.fy * pc[:, 1] / zs + K.cy
    r = (np.column_stack([u, v]) - px) / sigma
    r[~valid] = 0.0
    if not jacobians:
        return r, None, None, valid
    n = len(z)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = K.fx / zs
    Jproj[:, 0, 2] = -K.fx * pc[:, 0] / zs**2
    Jproj[:, 1, 1] = K.fy / zs
    Jproj[:, 1, 2] = -K.fy * pc[:, 1] / zs**2
    Jproj /= sigma
    A = Jproj @ R_bc.T                                   # d r / d p_body
    J_pose = np.empty((n, 2, 6))
    J_pose[:, :, 0:3] = A @ so3.skew_batch(pb)
    RT = np.transpose(R_wb, (0, 2, 1))
    J_lm = A @ RT
    J_pose[:, :, 3:6] = -J_lm
    J_pose[~valid] = 0.0
    J_lm[~valid] = 0.0
    return r, J_pose, J_lm, valid


def reprojection_residual(state: KeyframeState | Pose, T_body_cam: Pose, K: CameraIntrinsics,
                          landmark, pixel_obs, sigma_px=1.0):
    """Single-observation form: ``(residual (2,), J_pose (2,6), J_landmark (2,3))``."""
    R, p = _rp(state)
    r, Jp, Jl, valid = reprojection_residuals(
        R[None], p[None], T_body_cam.R, T_body_cam.translation, K,
        np.asarray(landmark, float)[None], np.asarray(pixel_obs, float)[None], sigma_px)
    if not valid[0]:
        raise BehindCamera("landmark behind camera; residual block dropped")
    return r[0], Jp[0], Jl[0]


# --------------------------------------------------------------------------- #
# Depth
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class DepthModel:
    fx: float
    baseline: float
    pixel_sigma: float = 1.0
    cutoff_factor: float = 40.0
    weight: float = 1.0

    def gated(self, depth):
        depth = np.asarray(depth, dtype=float)
        return depth >= self.cutoff_factor * self.baseline

    def sigma(self, depth):
        return stereo_depth_sigma(depth, self.pixel_sigma, self.fx, self.baseline)


def depth_residuals(R_wb, p_wb, R_bc0, t_bc0, landmarks, depth, model: DepthModel, jacobians=True):
    """Depth residuals ``sqrt(w) * (measured - z_cam) / sigma_d`` for already-gated rows.

    Also returns the unweighted normalized error, which the robust loss acts on.
    """
    pb, pc = camera_points(R_wb, p_wb, R_bc0, t_bc0, landmarks)
    sigma_d = model.sigma(depth)
    scale = np.sqrt(model.weight) / sigma_d
    e = (depth - pc[:, 2]) / sigma_d
    r = np.sqrt(model.weight) * e
    if not jacobians:
        return r, e, None, None
    n = len(depth)
    # d z_c / d p_body = e3^T R_bc^T = third column of R_bc, as a row
    dz_dpb = np.broadcast_to(R_bc0[:, 2], (n, 3))
    J_lm = -(scale[:, None] * np.einsum("nj,nkj->nk", dz_dpb, R_wb))
    J_pose = np.empty((n, 1, 6))
    J_pose[:, 0, 0:3] = -scale[:, None] * np.einsum("nj,njk->nk", dz_dpb, so3.skew_batch(pb))
    J_pose[:, 0, 3:6] = -J_lm
    return r, e, J_pose, J_lm[:, None, :]


def depth_residual(state: KeyframeState | Pose, T_body_cam0: Pose, landmark, measured_depth,
                   baseline, fx, pixel_sigma=1.0, cutoff_factor=40.0, weight=1.0):
    """Single-observation form; None when the measurement is beyond the stereo cutoff."""
    if not measured_depth > 0:
        raise ValueError("measured depth must be positive")
    model = DepthModel(fx, baseline, pixel_sigma, cutoff_factor, weight)
    if model.gated(measured_depth):
        return None
    R, p = _rp(state)
    r, _, Jp, Jl = depth_residuals(R[None], p[None], T_body_cam0.R, T_body_cam0.translation,
                                   np.asarray(landmark, float)[None],
                                   np.array([float(measured_depth)]), model)
    return float(r[0]), Jp[0], Jl[0]


def _rp(state):
    if isinstance(state, Pose):
        return state.R, state.translation
    return state.R, state.p


# --------------------------------------------------------------------------- #
# Inertial
# --------------------------------------------------------------------------- #

def inertial_residual(si: KeyframeState, sj: KeyframeState, pre: PreintegratedImu,
                      gravity=9.81, sqrt_info=None, jacobians=True, time_tol=1e-6):
    """15-dim whitened residual: preintegration error (9) then bias random walk (6).

    Returns ``(r, J_i, J_j)`` with Jacobians over the 15-dim error states.
    """
    if abs((sj.timestamp - si.timestamp) - pre.dt) > time_tol:
        raise NonAdjacentStates(
            f"factor spans {pre.dt:.6f} s but states are {sj.timestamp - si.timestamp:.6f} s apart")
    g = np.array([0.0, 0.0, -gravity])
    T = pre.dt
    dbg = si.bg - pre.bias_lin.gyro
    dba = si.ba - pre.bias_lin.accel
    phi = pre.J_R_bg @ dbg
    dR = pre.delta_R @ so3.exp(phi)
    dv = pre.delta_v + pre.J_v_bg @ dbg + pre.J_v_ba @ dba
    dp = pre.delta_p + pre.J_p_bg @ dbg + pre.J_p_ba @ dba

    RiT = si.R.T
    E = dR.T @ RiT @ sj.R
    rR = so3.log(E)
    vel_term = RiT @ (sj.v - si.v - g * T)
    pos_term = RiT @ (sj.p - si.p - si.v * T - 0.5 * g * T * T)
    r9 = np.concatenate([rR, vel_term - dv, pos_term - dp])
    L = pre.sqrt_information() if sqrt_info is None else sqrt_info
    s_bg = max(pre.noise.gyro_random_walk, 1e-12) * np.sqrt(T)
    s_ba = max(pre.noise.accel_random_walk, 1e-12) * np.sqrt(T)
    r = np.concatenate([L @ r9, (sj.bg - si.bg) / s_bg, (sj.ba - si.ba) / s_ba])
    if not jacobians:
        return r, None, None

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Jrinv = so3.right_jacobian_inv(rR)
    Ji[0:3, 0:3] = -Jrinv @ sj.R.T @ si.R
    Jj[0:3, 0:3] = Jrinv
    Ji[0:3, 9:12] = -Jrinv @ E.T @ so3.right_jacobian(phi) @ pre.J_R_bg
    Ji[3:6, 0:3] = so3.skew(vel_term)
    Ji[3:6, 6:9] = -RiT
    Jj[3:6, 6:9] = RiT
    Ji[3:6, 9:12] = -pre.J_v_bg
    Ji[3:6, 12:15] = -pre.J_v_ba
    Ji[6:9, 0:3] = so3.skew(pos_term)
    Ji[6:9, 3:6] = -RiT
    Jj[6:9, 3:6] = RiT
    Ji[6:9, 6:9] = -RiT * T
    Ji[6:9, 9:12] = -pre.J_p_bg
    Ji[6:9, 12:15] = -pre.J_p_ba
    Ji[:9] = L @ Ji[:9]
    Jj[:9] = L @ Jj[:9]
    I3 = np.eye(3)
    Ji[9:12, 9:12] = -I3 / s_bg
    Jj[9:12, 9:12] = I3 / s_bg
    Ji[12:15, 12:15] = -I3 / s_ba
    Jj[12:15, 12:15] = I3 / s_ba
    return r, Ji, Jj


@dataclass
class ImuFactorStack:
    """Per-factor preintegration quantities stacked for batched evaluation."""

    dt: np.ndarray
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    bg_lin: np.ndarray
    ba_lin: np.ndarray
    sqrt_info: np.ndarray
    s_bg: np.ndarray
    s_ba: np.ndarray

    @classmethod
    def from_factors(cls, pres, sqrt_infos=None):
        if sqrt_infos is None:
            sqrt_infos = [p.sqrt_information() for p in pres]
        T = np.array([p.dt for p in pres])
        return cls(
            T, np.array([p.delta_R for p in pres]), np.array([p.delta_v for p in pres]),
            np.array([p.delta_p for p in pres]), np.array([p.J_R_bg for p in pres]),
            np.array([p.J_v_bg for p in pres]), np.array([p.J_v_ba for p in pres]),
            np.array([p.J_p_bg for p in pres]), np.array([p.J_p_ba for p in pres]),
            np.array([p.bias_lin.gyro for p in pres]), np.array([p.bias_lin.accel for p in pres]),
            np.array(sqrt_infos),
            np.array([max(p.noise.gyro_random_walk, 1e-12) for p in pres]) * np.sqrt(T),
            np.array([max(p.noise.accel_random_walk, 1e-12) for p in pres]) * np.sqrt(T))


def _mv(A, x):
    return (A @ x[..., None])[..., 0]


def inertial_residuals(Ri, pi, vi, bgi, bai, Rj, pj, vj, bgj, baj, st: ImuFactorStack,
                       gravity=9.81, jacobians=True):
    """Batched ``inertial_residual`` over K factors; arrays are stacked per factor."""
    g = np.array([0.0, 0.0, -gravity])
    T = st.dt[:, None]
    dbg = bgi - st.bg_lin
    dba = bai - st.ba_lin
    phi = _mv(st.J_R_bg, dbg)
    Ephi = so3.exp_batch(phi)
    dR = st.delta_R @ Ephi
    dv = st.delta_v + _mv(st.J_v_bg, dbg) + _mv(st.J_v_ba, dba)
    dp = st.delta_p + _mv(st.J_p_bg, dbg) + _mv(st.J_p_ba, dba)
    RiT = np.transpose(Ri, (0, 2, 1))
    E = np.transpose(dR, (0, 2, 1)) @ RiT @ Rj
    rR = so3.log_batch(E)
    vel_term = _mv(RiT, vj - vi - g * T)
    pos_term = _mv(RiT, pj - pi - vi * T - 0.5 * g * T * T)
    r9 = np.concatenate([rR, vel_term - dv, pos_term - dp], axis=1)
    L = st.sqrt_info
    r = np.concatenate([_mv(L, r9), (bgj - bgi) / st.s_bg[:, None], (baj - bai) / st.s_ba[:, None]],
                       axis=1)
    if not jacobians:
        return r, None, None
    K = len(T)
    Ji = np.zeros((K, 15, 15))
    Jj = np.zeros((K, 15, 15))
    Jrinv = so3.right_jacobian_inv_batch(rR)
    Ji[:, 0:3, 0:3] = -Jrinv @ np.transpose(Rj, (0, 2, 1)) @ Ri
    Jj[:, 0:3, 0:3] = Jrinv
    Ji[:, 0:3, 9:12] = -Jrinv @ np.transpose(E, (0, 2, 1)) @ so3.right_jacobian_batch(phi) @ st.J_R_bg
    Ji[:, 3:6, 0:3] = so3.skew_batch(vel_term)
    Ji[:, 3:6, 6:9] = -RiT
    Jj[:, 3:6, 6:9] = RiT
    Ji[:, 3:6, 9:12] = -st.J_v_bg
    Ji[:, 3:6, 12:15] = -st.J_v_ba
    Ji[:, 6:9, 0:3] = so3.skew_batch(pos_term)
    Ji[:, 6:9, 3:6] = -RiT
    Jj[:, 6:9, 3:6] = RiT
    Ji[:, 6:9, 6:9] = -RiT * T[:, :, None]
    Ji[:, 6:9, 9:12] = -st.J_p_bg
    Ji[:, 6:9, 12:15] = -st.J_p_ba
    Ji[:, :9] = L @ Ji[:, :9]
    Jj[:, :9] = L @ Jj[:, :9]
    I3 = np.eye(3)
    Ji[:, 9:12, 9:12] = -I3 / st.s_bg[:, None, None]
    Jj[:, 9:12, 9:12] = I3 / st.s_bg[:, None, None]
    Ji[:, 12:15, 12:15] = -I3 / st.s_ba[:, None, None]
    Jj[:, 12:15, 12:15] = I3 / st.s_ba[:, None, None]
    return r, Ji, Jj


# --------------------------------------------------------------------------- #
# Robust loss
# --------------------------------------------------------------------------- #

def huber(sq_norm, delta):
    """Huber cost and IRLS weight on squared whitened norms."""
    s = np.sqrt(sq_norm)
    inlier = s <= delta
    cost = np.where(inlier, sq_norm, 2.0 * delta * s - delta * delta)
    weight = np.where(inlier, 1.0, delta / np.maximum(s, 1e-300))
    return cost, weight
