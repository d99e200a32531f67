"""Sliding-window estimator: frame ingestion, landmark initialization, marginalization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import so3
from ..errors import InsufficientObservations, SolverDiverged
from ..geometry import unproject
from ..preintegration import ImuBias, NoiseParams, integrate, predict_state, samples_between
from ..simulator import SensorLog
from .problem import (CameraModel, FrameObservations, LinearPrior, WindowProblem, build_structure,
                      dense_system, prior_from_information, schur_marginalize, solve_window)
from .residuals import STATE_DIM, DepthModel, KeyframeState

log = logging.getLogger(__name__)

MODES = ("mono-inertial", "stereo", "stereo-inertial")
_DEFAULT_NOISE = NoiseParams()


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "stereo-inertial"
    window_size: int = 10
    max_iterations: int = 15
    cost_tolerance: float = 1e-3            # stop once an LM step lowers the cost by less than this fraction
    huber_px: float = 2.0
    depth_weight: float = 1.0
    depth_cutoff_factor: float = 40.0
    pixel_sigma: float = 1.0
    mask: Optional[tuple] = None            # (u0, v0, u1, v1) pixels, applied to every camera
    batch: bool = False                     # full-window refinement after the sliding pass
    min_landmarks: int = 5
    max_prior_landmarks: int = 60           # landmarks a marginalization prior may keep
    min_parallax_deg: float = 1.0
    velocity_sigma: float = 0.05            # prior on the initial velocity, m/s
    gyro_bias_sigma: float = 0.01
    accel_bias_sigma: float = 0.1
    imu_noise: Optional[NoiseParams] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.window_size < 3:
            raise ValueError("window size must be at least 3")
        if not self.depth_cutoff_factor > 0:
            raise ValueError("depth cutoff factor must be positive")
        if self.depth_weight < 0:
            raise ValueError("depth weight must be non-negative")
        if not self.pixel_sigma > 0 or not self.huber_px > 0:
            raise ValueError("pixel sigma and Huber threshold must be positive")
        if self.max_prior_landmarks < 0:
            raise ValueError("max_prior_landmarks must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if not 0 < self.cost_tolerance < 1:
            raise ValueError("cost tolerance must lie in (0, 1)")
        if self.mask is not None:
            u0, v0, u1, v1 = map(float, self.mask)
            if not (u1 > u0 and v1 > v0):
                raise ValueError("mask rectangle must have u1 > u0 and v1 > v0")
            object.__setattr__(self, "mask", (u0, v0, u1, v1))

    @property
    def inertial(self):
        return self.mode != "stereo"

    @property
    def stereo(self):
        return self.mode != "mono-inertial"


@dataclass
class FrameDiagnostics:
    frame_id: int
    timestamp: float
    n_observations: int = 0
    n_tracked: int = 0
    n_landmarks: int = 0
    n_reprojection: int = 0
    n_depth: int = 0
    n_depth_gated: int = 0
    iterations: int = 0
    converged: bool = True
    gap: bool = False
    window: int = 0


@dataclass
class EstimatorResult:
    timestamps: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    diagnostics: list
    config: EstimatorConfig

    @property
    def trajectory(self):
        from ..evaluation import Trajectory
        return Trajectory.from_rotations(self.timestamps, self.positions, self.rotations)

    @property
    def gaps(self):
        return [d.frame_id for d in self.diagnostics if d.gap]

    def totals(self):
        return {
            "depth_residuals": sum(d.n_depth for d in self.diagnostics),
            "depth_gated": sum(d.n_depth_gated for d in self.diagnostics),
            "reprojection_residuals": sum(d.n_reprojection for d in self.diagnostics),
            "gaps": len(self.gaps),
        }


def apply_mask(obs: FrameObservations, mask) -> FrameObservations:
    """Drop every row of a landmark whose pixel in either camera falls inside the rectangle."""
    if mask is None or len(obs) == 0:
        return obs
    u0, v0, u1, v1 = mask
    inside = ((obs.px[:, 0] >= u0) & (obs.px[:, 0] <= u1)
              & (obs.px[:, 1] >= v0) & (obs.px[:, 1] <= v1))
    bad = np.isin(obs.landmark, obs.landmark[inside])
    return obs.select(~bad)


def estimator_noise(log_: SensorLog, config: EstimatorConfig) -> NoiseParams:
    if config.imu_noise is not None:
        return config.imu_noise
    spec = log_.imu_spec
    vals = [spec.gyro_noise_density, spec.accel_noise_density,
            spec.gyro_random_walk, spec.accel_random_walk]
    defaults = [_DEFAULT_NOISE.gyro_noise_density, _DEFAULT_NOISE.accel_noise_density,
                _DEFAULT_NOISE.gyro_random_walk, _DEFAULT_NOISE.accel_random_walk]
    # a noiseless log would give singular factors; fall back to nominal densities
    return NoiseParams(*[v if v > 0 else d for v, d in zip(vals, defaults)])


def triangulate_rays(centers, directions):
    """Least-squares intersection of rays; returns the point and the largest ray angle (rad)."""
    d = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, centers)
    cosang = np.clip(d @ d.T, -1.0, 1.0)
    parallax = float(np.arccos(np.min(cosang)))
    if np.linalg.cond(A) > 1e12:
        return None, parallax
    return np.linalg.solve(A, b), parallax


class SlidingWindowEstimator:
    """Processes one frame at a time; every frame becomes a keyframe."""

    def __init__(self, sensor_log: SensorLog, config: EstimatorConfig = EstimatorConfig()):
        self.log = sensor_log
        self.config = config
        K = sensor_log.intrinsics
        T_bc0 = sensor_log.T_body_cam0
        T_bc1 = T_bc0 @ sensor_log.rig.T_cam0_cam1
        depth = DepthModel(K.fx, sensor_log.rig.baseline, config.pixel_sigma,
                           config.depth_cutoff_factor, config.depth_weight)
        self.camera = CameraModel(K, T_bc0, T_bc1, depth, config.pixel_sigma, config.huber_px)
        self.noise = estimator_noise(sensor_log, config)
        self.problem = WindowProblem(
            states=[], observations=[], imu=[], landmarks={}, camera=self.camera,
            inertial=config.inertial, use_stereo=config.stereo, prior=None, fixed_pose=0,
            gravity=sensor_log.gravity)
        self.outputs = {}
        self.diagnostics = []
        self.archive = {}               # last estimate of every landmark that left the window
        self._starts, self._stops = sensor_log.frame_slices()
        self._last_motion = None        # (twist over last interval, its duration) for stereo mode

    # ------------------------------------------------------------------ #
    def frame_observations(self, index) -> FrameObservations:
        lg = self.log
        sl = slice(self._starts[index], self._stops[index])
        obs = FrameObservations(lg.obs_landmark[sl].copy(), lg.obs_cam[sl].copy(),
                                lg.obs_px[sl].copy(), lg.obs_depth[sl].copy())
        if not self.config.stereo:
            obs = obs.select(obs.cam == 0)
            obs.depth[:] = np.nan
        return apply_mask(obs, self.config.mask)

    def _tracked(self, obs: FrameObservations):
        seen = set()
        for o in self.problem.observations:
            seen.update(int(x) for x in o.landmark[o.cam == 0])
        tracked = set()
        for lm, cam, d in zip(obs.landmark, obs.cam, obs.depth):
            if cam != 0:
                continue
            lm = int(lm)
            new_stereo = self.config.inertial and self.config.stereo and np.isfinite(d)
            if lm in seen or lm in self.problem.landmarks or new_stereo:
                tracked.add(lm)
        return len(tracked)

    # ------------------------------------------------------------------ #
    def _initial_state(self, t, frame_id):
        v = self.log.initial_velocity_body.copy() if self.config.inertial else np.zeros(3)
        return KeyframeState(t, np.eye(3), np.zeros(3), v, np.zeros(3), np.zeros(3), frame_id)

    def _initial_prior(self, state):
        c = self.config
        J = np.zeros((9, STATE_DIM))
        J[0:3, 6:9] = np.eye(3) / c.velocity_sigma
        J[3:6, 9:12] = np.eye(3) / c.gyro_bias_sigma
        J[6:9, 12:15] = np.eye(3) / c.accel_bias_sigma
        return LinearPrior([state.frame_id], J, np.zeros(9), [state], STATE_DIM)

    def _predict(self, t, frame_id):
        last = self.problem.states[-1]
        if self.config.inertial:
            imu = self.log.imu
            ts, g, a = samples_between(imu.timestamps, imu.gyro, imu.accel, last.timestamp, t)
            pre = integrate(ts, g, a, last.bias, self.noise)
            R, p, v = predict_state(last.R, last.p, last.v, last.bias, pre, self.log.gravity)
            return KeyframeState(t, so3.normalize(R), p, v, last.bg.copy(), last.ba.copy(),
                                 frame_id), pre
        dt = t - last.timestamp
        if self._last_motion is None:
            return KeyframeState(t, last.R.copy(), last.p.copy(), frame_id=frame_id), None
        (omega, vel_body), _ = self._last_motion
        R = last.R @ so3.exp(omega * dt)
        p = last.p + last.R @ (vel_body * dt)
        return KeyframeState(t, R, p, frame_id=frame_id), None

    def _update_motion(self):
        st = self.problem.states
        if len(st) < 2:
            return
        a, b = st[-2], st[-1]
        dt = b.timestamp - a.timestamp
        if dt <= 0:
            return
        omega = so3.log(a.R.T @ b.R) / dt
        vel_body = a.R.T @ (b.p - a.p) / dt
        self._last_motion = ((omega, vel_body), dt)

    # ------------------------------------------------------------------ #
    def _ray(self, state, px):
        K = self.camera.K
        T = self.camera.T_body_cam0
        d_c = np.array([(px[0] - K.cx) / K.fx, (px[1] - K.cy) / K.fy, 1.0])
        center = state.p + state.R @ T.translation
        return center, state.R @ (T.R @ d_c)

    def _init_landmarks(self):
        """Initialize landmarks from stereo depth or, failing that, multi-view triangulation."""
        pb = self.problem
        T = self.camera.T_body_cam0
        pending = {}
        for k, ob in enumerate(pb.observations):
            for lm, cam, px, d in zip(ob.landmark, ob.cam, ob.px, ob.depth):
                lm = int(lm)
                if cam != 0 or lm in pb.landmarks:
                    continue
                pending.setdefault(lm, []).append((k, px, d))
        min_par = math.radians(self.config.min_parallax_deg)
        for lm, rows in pending.items():
            if self.config.stereo:
                with_depth = [r for r in rows if np.isfinite(r[2]) and r[2] > 0]
                if with_depth:
                    k, px, d = with_depth[-1]
                    s = pb.states[k]
                    p_c = unproject(self.camera.K, px, d)
                    pb.landmarks[lm] = s.R @ (T.R @ p_c + T.translation) + s.p
                    continue
            if len({r[0] for r in rows}) < 2:
                continue
            rays = [self._ray(pb.states[k], px) for k, px, _ in rows]
            centers = np.array([r[0] for r in rays])
            dirs = np.array([r[1] for r in rays])
            point, parallax = triangulate_rays(centers, dirs)
            if point is None or parallax < min_par:
                continue
            depths = np.einsum("ni,ni->n", point - centers, dirs / np.linalg.norm(dirs, axis=1)[:, None])
            if np.all(depths > 0.5):
                pb.landmarks[lm] = point

    # ------------------------------------------------------------------ #
    def process(self, index):
        lg = self.log
        t = float(lg.frame_times[index])
        fid = int(lg.frame_ids[index])
        obs = self.frame_observations(index)
        diag = FrameDiagnostics(fid, t, n_observations=len(obs))
        pb = self.problem

        if not pb.states:
            state = self._initial_state(t, fid)
            pb.states.append(state)
            pb.observations.append(obs)
            if self.config.inertial:
                pb.prior = self._initial_prior(state)
            self._init_landmarks()
            diag.n_tracked = self._tracked(obs)
            diag.window = 1
            self.diagnostics.append(diag)
            return diag

        state, pre = self._predict(t, fid)
        diag.n_tracked = self._tracked(obs)
        if diag.n_tracked < self.config.min_landmarks:
            diag.gap = True
            if not self.config.inertial:
                # stereo only: nothing ties the frame to the window; restart at the prediction
                self._restart(state, obs)
                diag.window = 1
                self.diagnostics.append(diag)
                return diag
            # inertial modes coast on the IMU factor; the few observations stay so tracking can resume
        pb.states.append(state)
        pb.observations.append(obs)
        if pre is not None:
            pb.imu.append(pre)
        self._init_landmarks()
        try:
            rep = solve_window(pb, max_iterations=self.config.max_iterations,
                              rel_tol=self.config.cost_tolerance)
        except SolverDiverged as exc:
            raise SolverDiverged(str(exc), frame_index=index) from exc
        diag.iterations = rep.iterations
        diag.converged = rep.converged
        diag.n_landmarks = rep.n_landmarks
        last = len(pb.states) - 1
        st = build_structure(pb)
        diag.n_reprojection = int(np.sum(st.r_state == last))
        diag.n_depth = int(np.sum(st.d_state == last))
        diag.n_depth_gated = self._gated_count(obs)
        if not self.config.inertial:
            self._update_motion()
        while len(pb.states) > self.config.window_size:
            self.slide()
        diag.window = len(pb.states)
        self.diagnostics.append(diag)
        return diag

    def _gated_count(self, obs):
        if not self.config.stereo or self.config.depth_weight <= 0:
            return 0
        d = obs.depth[(obs.cam == 0) & np.isfinite(obs.depth)]
        return int(np.sum(self.camera.depth.gated(d)))

    # ------------------------------------------------------------------ #
    def slide(self):
        s0, dropped = marginalize_oldest(self.problem, self.config.max_prior_landmarks)
        self.outputs[s0.frame_id] = (s0.timestamp, s0.R.copy(), s0.p.copy())
        self.archive.update(dropped)

    def _restart(self, state, obs):
        """Drop the window and start a fresh one at ``state`` (stereo mode after lost tracking)."""
        pb = self.problem
        for s in pb.states:
            self.outputs[s.frame_id] = (s.timestamp, s.R.copy(), s.p.copy())
        self.archive.update(pb.landmarks)
        pb.states, pb.observations, pb.imu = [state], [obs], []
        pb.landmarks = {}
        pb.prior, pb.fixed_pose = None, 0
        self._init_landmarks()

    def finish(self):
        for s in self.problem.states:
            self.outputs[s.frame_id] = (s.timestamp, s.R.copy(), s.p.copy())
        for k, v in self.problem.landmarks.items():
            self.archive[k] = v

    def result(self) -> EstimatorResult:
        ids = [int(f) for f in self.log.frame_ids]
        rows = [self.outputs[f] for f in ids]
        return EstimatorResult(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
                               np.array([r[2] for r in rows]), self.diagnostics, self.config)


def marginalize_oldest(pb: WindowProblem, max_prior_landmarks=60):
    """Marginalize the oldest keyframe into a dense prior; returns it and the dropped landmarks.

    The prior keeps the successor state (inertial modes) and up to
    ``max_prior_landmarks`` landmarks that the oldest keyframe or the previous
    prior touches and that are still observed inside the window, longest
    remaining tracks first. Landmarks no later keyframe observes leave the
    window with it.
    """
    s0 = pb.states[0]
    later = {}
    for ob in pb.observations[1:]:
        for lm in set(ob.landmark[ob.cam == 0].tolist()):
            later[lm] = later.get(lm, 0) + 1
    ob0 = pb.observations[0]
    held = set(int(x) for x in pb.prior_landmarks())
    touched = (set(int(x) for x in ob0.landmark) | held) & set(pb.landmarks)

    states = [s0, pb.states[1]] if pb.inertial else [s0]
    sub = WindowProblem(
        states=states,
        observations=[ob0] + [FrameObservations.empty()] * (len(states) - 1),
        imu=pb.imu[:1] if pb.inertial else [],
        landmarks={k: pb.landmarks[k] for k in touched},
        camera=pb.camera, inertial=pb.inertial, use_stereo=pb.use_stereo,
        prior=pb.prior, fixed_pose=pb.fixed_pose, gravity=pb.gravity, all_landmarks=True)
    H, g, layout = dense_system(sub)
    kept_states = [pb.states[1]] if pb.inertial else []
    cand = sorted((k for k in layout.landmark_slices if k in later), key=lambda k: (-later[k], k))
    kept_lms = sorted(cand[:max_prior_landmarks])
    keep = [layout.state_slices[s.frame_id] for s in kept_states]
    keep += [layout.landmark_slices[k] for k in kept_lms]
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    marg = np.setdiff1d(np.arange(len(g)), keep)
    prior = None
    if len(keep):
        kept_set = set(kept_lms)
        # landmarks outside the old prior couple only to poses: eliminate them blockwise
        blocks = [layout.landmark_slices[k] for k in layout.landmark_slices
                  if k not in held and k not in kept_set]
        H_red, g_red = schur_marginalize(H, g, marg, keep, blocks=blocks)
        J, r = prior_from_information(H_red, g_red)
        prior = LinearPrior([s.frame_id for s in kept_states], J, r, kept_states, pb.dim,
                            landmark_ids=kept_lms,
                            lin_landmarks=[pb.landmarks[k] for k in kept_lms])
    if prior is not None and prior.fixes_gauge:
        pb.prior, pb.fixed_pose = prior, None
    else:
        # nothing left to carry the gauge: freeze the new oldest pose instead
        pb.prior, pb.fixed_pose = (prior if pb.inertial else None), 0
    if pb.inertial:
        pb.imu.pop(0)
    pb.states.pop(0)
    pb.observations.pop(0)
    dropped = {}
    for lm in (touched - set(later)) | set(int(x) for x in ob0.landmark):
        if lm not in later and lm in pb.landmarks:
            dropped[lm] = pb.landmarks.pop(lm)
    return s0, dropped


def slide_window(problem: WindowProblem, state: KeyframeState, observations: FrameObservations,
                 imu=None, window_size=10, max_prior_landmarks=60) -> WindowProblem:
    """Append a keyframe, marginalizing the oldest ones so at most ``window_size`` remain.

    ``state`` carries the predicted initial values and ``imu`` the factor from
    the current newest state to it (inertial problems only).
    """
    if problem.inertial and problem.states and imu is None:
        raise ValueError("inertial problems need the IMU factor of the new keyframe")
    while len(problem.states) >= window_size:
        marginalize_oldest(problem, max_prior_landmarks)
    problem.states.append(state)
    problem.observations.append(observations)
    if problem.inertial and imu is not None and len(problem.states) > 1:
        problem.imu.append(imu)
    return problem


def run_estimator(sensor_log: SensorLog, config: EstimatorConfig = EstimatorConfig()) -> EstimatorResult:
    """Estimate a body pose for every frame of the log."""
    if sensor_log.n_frames < 2:
        raise InsufficientObservations("log has fewer than two frames")
    if config.inertial and len(sensor_log.imu) < 2:
        raise InsufficientObservations(f"mode {config.mode} needs IMU samples")
    est = SlidingWindowEstimator(sensor_log, config)
    for i in range(sensor_log.n_frames):
        est.process(i)
    est.finish()
    res = est.result()
    if config.batch:
        res = batch_refine(sensor_log, config, est, res)
    return res


def batch_refine(sensor_log: SensorLog, config: EstimatorConfig, est: SlidingWindowEstimator,
                 res: EstimatorResult) -> EstimatorResult:
    """One full-length Levenberg-Marquardt pass over every keyframe, seeded by the sliding pass.

    The normal equations are dense in the state dimension, so this is only
    meant for short logs.
    """
    inserted = {d.frame_id for d in est.diagnostics if not (d.gap and not config.inertial)}
    states, observations, imu = [], [], []
    index_of = {int(f): i for i, f in enumerate(sensor_log.frame_ids)}
    for fid in sorted(inserted, key=lambda f: index_of[f]):
        i = index_of[fid]
        t, R, p = est.outputs[fid]
        s = KeyframeState(t, R.copy(), p.copy(), frame_id=fid)
        if config.inertial:
            s.v = np.zeros(3)
        obs = est.frame_observations(i)
        states.append(s)
        observations.append(obs)
    if config.inertial:
        # velocities by central differences, biases at zero; the solve refines both
        for k, s in enumerate(states):
            a = states[max(k - 1, 0)]
            b = states[min(k + 1, len(states) - 1)]
            s.v = (b.p - a.p) / max(b.timestamp - a.timestamp, 1e-9)
        lg = sensor_log.imu
        for a, b in zip(states[:-1], states[1:]):
            ts, g, acc = samples_between(lg.timestamps, lg.gyro, lg.accel, a.timestamp, b.timestamp)
            imu.append(integrate(ts, g, acc, ImuBias(), est.noise))
    problem = WindowProblem(states, observations, imu, dict(est.archive), est.camera,
                            inertial=config.inertial, use_stereo=config.stereo,
                            prior=est._initial_prior(states[0]) if config.inertial else None,
                            fixed_pose=0, gravity=sensor_log.gravity)
    try:
        solve_window(problem, max_iterations=max(config.max_iterations, 30))
    except SolverDiverged as exc:
        raise SolverDiverged(f"batch refinement: {exc}", frame_index=None) from exc
    refined = {s.frame_id: (s.timestamp, s.R, s.p) for s in problem.states}
    out = dict(est.outputs)
    out.update(refined)
    ids = [int(f) for f in sensor_log.frame_ids]
    rows = [out[f] for f in ids]
    return EstimatorResult(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
                           np.array([r[2] for r in rows]), res.diagnostics, config)
