"""Synthetic rail scenarios: track geometry, kinematics, landmarks, IMU and camera streams.

The vehicle is tied to a planar track at fixed height with its body x-axis on
the track tangent, no roll, no pitch and no lateral slip. Everything is
generated from analytic path and speed functions, so ground truth is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import so3
from .errors import DegenerateRay, DiscontinuousTangent, ProfileOverrunsPath
from .geometry import (R_BODY_CAM, CameraIntrinsics, Landmark, Pose, StereoRig,
                       matrix_to_quat, triangulate_stereo)

GRAVITY = 9.81
_TIME_EPS = 1e-9


# --------------------------------------------------------------------------- #
# Track geometry
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Straight:
    length: float
    heading: Optional[float] = None  # optional absolute start heading, checked for continuity


@dataclass(frozen=True)
class Arc:
    radius: float
    angle: float  # signed, positive turns left
    heading: Optional[float] = None

    @property
    def length(self):
        return self.radius * abs(self.angle)


@dataclass(frozen=True)
class PathSpec:
    elements: tuple
    height: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise ValueError("path needs at least one element")
        for el in self.elements:
            if isinstance(el, Straight):
                if not el.length > 0:
                    raise ValueError("straight length must be positive")
            elif isinstance(el, Arc):
                if not el.radius > 10.0:
                    raise ValueError("arc radius must exceed 10 m")
                if el.angle == 0:
                    raise ValueError("arc angle must be nonzero")
            else:
                raise TypeError(f"unknown path element {el!r}")

    @property
    def length(self):
        return float(sum(el.length for el in self.elements))


class RailPath:
    """Arc-length parameterized planar curve built from straights and arcs.

    Outside ``[0, length]`` the curve continues straight along the end tangents.
    """

    def __init__(self, spec: PathSpec):
        self.spec = spec
        self.height = spec.height
        s0, xy, heading = 0.0, np.zeros(2), 0.0
        starts, segs = [], []
        for el in spec.elements:
            if el.heading is not None and abs(so3_wrap(el.heading - heading)) > 1e-9:
                raise DiscontinuousTangent(
                    f"element starts at heading {el.heading:.6f} but track arrives at {heading:.6f}")
            kappa = 0.0 if isinstance(el, Straight) else np.sign(el.angle) / el.radius
            segs.append((s0, xy.copy(), heading, kappa))
            starts.append(s0)
            xy, heading = _advance(xy, heading, kappa, el.length)
            s0 += el.length
        self._starts = np.array(starts)
        self._segs = segs
        self.length = s0
        self._end = (xy, heading)

    def _locate(self, s):
        idx = np.searchsorted(self._starts, s, side="right") - 1
        return np.clip(idx, 0, len(self._segs) - 1)

    def evaluate(self, s):
        """Position (n, 2), heading (n,) and signed curvature (n,) at arc lengths ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pos = np.empty((len(s), 2))
        head = np.empty(len(s))
        kap = np.empty(len(s))
        idx = self._locate(s)
        for i, (s0, xy0, h0, k) in enumerate(self._segs):
            m = idx == i
            if not np.any(m):
                continue
            ds = s[m] - s0
            kk = np.full(ds.shape, k)
            # extrapolate straight beyond both ends
            if i == 0:
                kk = np.where(ds < 0, 0.0, kk)
            if i == len(self._segs) - 1:
                seg_len = self.length - s0
                beyond = ds > seg_len
                if np.any(beyond):
                    p_end, h_end = self._end
                    extra = ds[beyond] - seg_len
                    pe = p_end + extra[:, None] * np.stack([np.cos(h_end), np.sin(h_end)])[None]
                    ds_in = np.where(beyond, seg_len, ds)
                    p, h = _advance_batch(xy0, h0, kk, ds_in)
                    p[beyond] = pe
                    h[beyond] = h_end
                    kk = np.where(beyond, 0.0, kk)
                    pos[m], head[m], kap[m] = p, h, kk
                    continue
            p, h = _advance_batch(xy0, h0, kk, ds)
            pos[m], head[m], kap[m] = p, h, kk
        return pos, head, kap

    def position(self, s):
        return self.evaluate(s)[0]

    def tangent(self, s):
        h = self.evaluate(s)[1]
        return np.stack([np.cos(h), np.sin(h)], axis=-1)

    def normal(self, s):
        """Left normal."""
        h = self.evaluate(s)[1]
        return np.stack([-np.sin(h), np.cos(h)], axis=-1)


def so3_wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _advance(xy, heading, kappa, ds):
    p, h = _advance_batch(xy, heading, np.array([kappa]), np.array([ds]))
    return p[0], float(h[0])


def _advance_batch(xy, heading, kappa, ds):
    kappa = np.asarray(kappa, dtype=float)
    ds = np.asarray(ds, dtype=float)
    h = heading + kappa * ds
    straight = np.abs(kappa) < 1e-15
    safe_k = np.where(straight, 1.0, kappa)
    dx = np.where(straight, ds * np.cos(heading), (np.sin(h) - np.sin(heading)) / safe_k)
    dy = np.where(straight, ds * np.sin(heading), (np.cos(heading) - np.cos(h)) / safe_k)
    return np.stack([xy[0] + dx, xy[1] + dy], axis=-1), h


def build_path(spec: PathSpec) -> RailPath:
    return RailPath(spec)


# --------------------------------------------------------------------------- #
# Speed profile
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Hold:
    speed: float
    duration: float

    @property
    def start_speed(self):
        return self.speed

    @property
    def end_speed(self):
        return self.speed


@dataclass(frozen=True)
class Ramp:
    start: float
    end: float
    duration: float

    @property
    def start_speed(self):
        return self.start

    @property
    def end_speed(self):
        return self.end


@dataclass(frozen=True)
class SpeedProfileSpec:
    elements: tuple

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise ValueError("speed profile needs at least one element")
        prev = None
        for el in self.elements:
            if not el.duration > 0:
                raise ValueError("speed element durations must be positive")
            if el.start_speed < 0 or el.end_speed < 0:
                raise ValueError("speeds must be non-negative")
            if prev is not None and abs(prev.end_speed - el.start_speed) > 1e-9:
                raise ValueError(
                    f"speed discontinuity: {prev.end_speed} m/s then {el.start_speed} m/s")
            prev = el

    @property
    def duration(self):
        return float(sum(el.duration for el in self.elements))

    @property
    def distance(self):
        return float(sum(0.5 * (el.start_speed + el.end_speed) * el.duration for el in self.elements))

    def evaluate(self, t):
        """Arc length, speed and tangential acceleration at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.zeros_like(t)
        v = np.zeros_like(t)
        a = np.zeros_like(t)
        t0, s0 = 0.0, 0.0
        for i, el in enumerate(self.elements):
            last = i == len(self.elements) - 1
            m = (t >= t0) & ((t < t0 + el.duration) | last)
            if i == 0:
                m |= t < t0
            acc = (el.end_speed - el.start_speed) / el.duration
            tau = t[m] - t0
            v[m] = el.start_speed + acc * tau
            s[m] = s0 + el.start_speed * tau + 0.5 * acc * tau**2
            a[m] = acc
            s0 += 0.5 * (el.start_speed + el.end_speed) * el.duration
            t0 += el.duration
        return s, v, a


# --------------------------------------------------------------------------- #
# Ground truth
# --------------------------------------------------------------------------- #

@dataclass
class GroundTruth:
    timestamps: np.ndarray
    positions: np.ndarray        # (n, 3) world
    rotations: np.ndarray        # (n, 3, 3) world-from-body
    velocities: np.ndarray       # (n, 3) world
    angular_rates: np.ndarray    # (n, 3) body
    accelerations: np.ndarray    # (n, 3) world
    arc_lengths: np.ndarray
    path: Optional[RailPath] = field(default=None, repr=False)
    profile: Optional[SpeedProfileSpec] = field(default=None, repr=False)

    def __len__(self):
        return len(self.timestamps)

    @property
    def rate_hz(self):
        return 1.0 / float(np.median(np.diff(self.timestamps)))

    def pose(self, i) -> Pose:
        return Pose.from_matrix(self.rotations[i], self.positions[i])

    @property
    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def quaternions(self):
        return np.array([matrix_to_quat(R) for R in self.rotations])

    def to_trajectory(self):
        from .evaluation import Trajectory
        return Trajectory(self.timestamps.copy(), self.positions.copy(), self.quaternions())


def sample_times(duration, rate_hz):
    n = int(np.floor(duration * rate_hz + _TIME_EPS)) + 1
    return np.arange(n) / rate_hz


def evaluate_kinematics(path: RailPath, profile: SpeedProfileSpec, t) -> GroundTruth:
    t = np.asarray(t, dtype=float)
    s, v, a = profile.evaluate(t)
    xy, yaw, kappa = path.evaluate(s)
    n = len(t)
    tangent = np.stack([np.cos(yaw), np.sin(yaw), np.zeros(n)], axis=-1)
    normal = np.stack([-np.sin(yaw), np.cos(yaw), np.zeros(n)], axis=-1)
    pos = np.column_stack([xy, np.full(n, path.height)])
    vel = v[:, None] * tangent
    acc = a[:, None] * tangent + (v**2 * kappa)[:, None] * normal
    omega = np.zeros((n, 3))
    omega[:, 2] = v * kappa
    return GroundTruth(t, pos, so3.rot_z_batch(yaw), vel, omega, acc, s, path, profile)


def sample_trajectory(path: RailPath, profile: SpeedProfileSpec, rate_hz: float) -> GroundTruth:
    if profile.distance > path.length + 1e-9:
        raise ProfileOverrunsPath(
            f"profile covers {profile.distance:.3f} m but the path is {path.length:.3f} m")
    return evaluate_kinematics(path, profile, sample_times(profile.duration, rate_hz))


# --------------------------------------------------------------------------- #
# IMU
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ImuSpec:
    rate_hz: float = 300.0
    gyro_noise_density: float = 2e-4      # rad/s/sqrt(Hz)
    accel_noise_density: float = 2e-3     # m/s^2/sqrt(Hz)
    gyro_random_walk: float = 4e-6        # rad/s^2/sqrt(Hz)
    accel_random_walk: float = 4e-5       # m/s^3/sqrt(Hz)
    initial_gyro_bias: tuple = (0.0, 0.0, 0.0)
    initial_accel_bias: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError("IMU rate must be positive")
        for name in ("gyro_noise_density", "accel_noise_density",
                     "gyro_random_walk", "accel_random_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def noiseless(self):
        return ImuSpec(self.rate_hz, 0.0, 0.0, 0.0, 0.0,
                       self.initial_gyro_bias, self.initial_accel_bias)


@dataclass
class ImuData:
    timestamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gyro_bias: Optional[np.ndarray] = None
    accel_bias: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.timestamps)


def generate_imu(gt: GroundTruth, spec: ImuSpec, rng=None, gravity=GRAVITY) -> ImuData:
    """Body-frame gyro and specific-force samples with white noise and random-walk biases."""
    gt_rate = gt.rate_hz if len(gt) > 1 else spec.rate_hz
    if spec.rate_hz < gt_rate * (1 - 1e-9):
        raise ValueError("IMU rate must be at least the ground-truth rate")
    if abs(spec.rate_hz - gt_rate) > 1e-6 * spec.rate_hz:
        if gt.path is None or gt.profile is None:
            raise ValueError("ground truth cannot be resampled at the IMU rate")
        gt = evaluate_kinematics(gt.path, gt.profile,
                                 sample_times(gt.timestamps[-1] - gt.timestamps[0], spec.rate_hz)
                                 + gt.timestamps[0])
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(gt)
    dt = 1.0 / spec.rate_hz
    g = np.array([0.0, 0.0, -gravity])
    Rt = np.transpose(gt.rotations, (0, 2, 1))
    gyro_true = gt.angular_rates
    accel_true = np.einsum("nij,nj->ni", Rt, gt.accelerations - g)

    def walk(b0, density):
        steps = rng.standard_normal((n, 3)) * density * np.sqrt(dt)
        steps[0] = 0.0
        return np.asarray(b0, dtype=float) + np.cumsum(steps, axis=0)

    bg = walk(spec.initial_gyro_bias, spec.gyro_random_walk)
    ba = walk(spec.initial_accel_bias, spec.accel_random_walk)
    gyro = gyro_true + bg + rng.standard_normal((n, 3)) * spec.gyro_noise_density / np.sqrt(dt)
    accel = accel_true + ba + rng.standard_normal((n, 3)) * spec.accel_noise_density / np.sqrt(dt)
    return ImuData(gt.timestamps.copy(), gyro, accel, bg, ba)


# --------------------------------------------------------------------------- #
# Scenario, landmarks, observations
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    path: PathSpec
    speed: SpeedProfileSpec
    imu: ImuSpec = ImuSpec()
    camera_rate_hz: float = 20.0
    intrinsics: CameraIntrinsics = CameraIntrinsics.default()
    baseline_m: float = 0.31
    pixel_noise_px: float = 1.0
    landmark_density_per_m: float = 2.0
    stereo_range_factor: float = 40.0
    max_range_m: float = 40.0
    aliasing_period_m: float = 0.0
    aliasing_mismatch_prob: float = 0.0
    dropouts: tuple = ()
    mask: Optional[tuple] = None
    extrinsic_rotation_rad: float = 0.0
    extrinsic_translation_m: float = 0.0
    extrinsic_reference_baseline_m: float = 0.0   # > 0: rotation error grows linearly with baseline
    body_cam_offset_m: tuple = (0.0, 0.0, 0.0)
    gravity: float = GRAVITY

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if not self.camera_rate_hz > 0:
            raise ValueError("camera rate must be positive")
        if not self.imu.rate_hz > 2 * self.camera_rate_hz:
            raise ValueError("IMU rate must exceed twice the camera rate")
        if not self.baseline_m > 0:
            raise ValueError("baseline must be positive")
        if self.pixel_noise_px < 0:
            raise ValueError("pixel noise must be non-negative")
        if not self.landmark_density_per_m > 0:
            raise ValueError("landmark density must be positive")
        if not self.stereo_range_factor > 0 or not self.max_range_m > 0:
            raise ValueError("ranges must be positive")
        if self.extrinsic_reference_baseline_m < 0:
            raise ValueError("extrinsic reference baseline must be non-negative")
        if self.aliasing_period_m < 0:
            raise ValueError("aliasing period must be non-negative")
        if not 0.0 <= self.aliasing_mismatch_prob <= 1.0:
            raise ValueError("mismatch probability must lie in [0, 1]")
        for t0, t1 in self.dropouts:
            if not t1 >= t0:
                raise ValueError("dropout interval must satisfy t0 <= t1")
        object.__setattr__(self, "dropouts", tuple(tuple(map(float, d)) for d in self.dropouts))

    @property
    def T_body_cam0(self):
        return Pose.from_matrix(R_BODY_CAM, self.body_cam_offset_m)

    @property
    def true_rig(self):
        return StereoRig.fronto_parallel(self.baseline_m)

    @property
    def reported_rig(self):
        """Calibration handed to the estimator: the true rig plus the configured error.

        The rotation error is about the camera y-axis, which shifts disparities;
        the translation error lengthens the baseline. With a reference baseline
        the rotation error is the configured angle at that baseline and scales
        linearly with the actual one (a rig that flexes more the wider it is).
        """
        angle = self.extrinsic_rotation_rad
        if self.extrinsic_reference_baseline_m > 0:
            angle *= self.baseline_m / self.extrinsic_reference_baseline_m
        R = so3.exp([0.0, angle, 0.0])
        t = np.array([self.baseline_m + self.extrinsic_translation_m, 0.0, 0.0])
        return StereoRig(Pose.from_matrix(R, t))

    def rngs(self):
        seqs = np.random.SeedSequence(int(self.seed)).spawn(4)
        return [np.random.default_rng(s) for s in seqs]


@dataclass
class LandmarkSet:
    ids: np.ndarray
    positions: np.ndarray          # (n, 3) world
    arc_positions: np.ndarray      # arc length of the landmark's foot point
    pattern: np.ndarray            # bool, part of the aliasing row

    def __len__(self):
        return len(self.ids)

    def as_landmarks(self):
        return [Landmark(int(i), p.copy()) for i, p in zip(self.ids, self.positions)]


def generate_landmarks(config: ScenarioConfig, path: RailPath, rng=None) -> LandmarkSet:
    """Random corridor landmarks plus an optional periodic ground row.

    The corridor extends ``max_range_m`` past the track end so that the last
    frames still see structure ahead.
    """
    if rng is None:
        rng = config.rngs()[0]
    s_lo, s_hi = -20.0, path.length + config.max_range_m
    n = rng.poisson(config.landmark_density_per_m * (s_hi - s_lo))
    s = rng.uniform(s_lo, s_hi, n)
    lateral = rng.uniform(2.0, 20.0, n) * rng.choice([-1.0, 1.0], n)
    height = rng.uniform(-1.0, 8.0, n)
    order = np.argsort(s, kind="stable")
    s, lateral, height = s[order], lateral[order], height[order]
    xy, yaw, _ = path.evaluate(s)
    nrm = np.stack([-np.sin(yaw), np.cos(yaw)], axis=-1)
    pos = np.column_stack([xy + lateral[:, None] * nrm, height])
    pattern = np.zeros(n, dtype=bool)

    if config.aliasing_period_m > 0:
        k = np.arange(int(np.floor((s_hi - 1e-9) / config.aliasing_period_m)) + 1)
        sp = k * config.aliasing_period_m
        xy_p, _, _ = path.evaluate(sp)
        pos = np.vstack([pos, np.column_stack([xy_p, np.zeros(len(sp))])])
        s = np.concatenate([s, sp])
        pattern = np.concatenate([pattern, np.ones(len(sp), dtype=bool)])

    ids = np.arange(len(s), dtype=np.int64)
    return LandmarkSet(ids, pos, s, pattern)


@dataclass
class SensorLog:
    """Everything the estimator sees. Observation arrays are parallel, one row per pixel."""

    imu: ImuData
    frame_times: np.ndarray
    frame_ids: np.ndarray
    obs_frame: np.ndarray
    obs_cam: np.ndarray
    obs_landmark: np.ndarray
    obs_px: np.ndarray
    obs_depth: np.ndarray          # NaN unless the row is a cam0 row of a stereo match
    obs_true_landmark: np.ndarray
    intrinsics: CameraIntrinsics
    rig: StereoRig
    T_body_cam0: Pose
    imu_spec: ImuSpec
    gravity: float = GRAVITY
    initial_velocity_body: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_frames(self):
        return len(self.frame_times)

    def tracks(self):
        """Per-landmark lists of (frame id, camera id, pixel, true landmark id)."""
        out = {}
        for i in range(len(self.obs_frame)):
            out.setdefault(int(self.obs_landmark[i]), []).append(
                (int(self.obs_frame[i]), int(self.obs_cam[i]), self.obs_px[i].copy(),
                 int(self.obs_true_landmark[i])))
        return out

    def frame_slices(self):
        """Start/stop row indices of each frame's observations (rows are frame-sorted)."""
        starts = np.searchsorted(self.obs_frame, self.frame_ids, side="left")
        stops = np.searchsorted(self.obs_frame, self.frame_ids, side="right")
        return starts, stops


def _in_mask(px, mask):
    if mask is None:
        return np.zeros(len(px), dtype=bool)
    u0, v0, u1, v1 = mask
    return (px[:, 0] >= u0) & (px[:, 0] <= u1) & (px[:, 1] >= v0) & (px[:, 1] <= v1)


def render_observations(gt: GroundTruth, landmarks: LandmarkSet, config: ScenarioConfig,
                        imu: Optional[ImuData] = None, rng=None, mismatch_rng=None) -> SensorLog:
    """Pixel observations of every visible landmark at each GT sample (one per camera frame)."""
    if rng is None or mismatch_rng is None:
        r = config.rngs()
        rng = r[2] if rng is None else rng
        mismatch_rng = r[3] if mismatch_rng is None else mismatch_rng
    K = config.intrinsics
    T_bc0 = config.T_body_cam0
    rig_true = config.true_rig
    rig_rep = config.reported_rig
    R_c0c1, t_c0c1 = rig_true.T_cam0_cam1.R, rig_true.T_cam0_cam1.translation
    sigma = config.pixel_noise_px
    stereo_range = config.stereo_range_factor * config.baseline_m
    P = landmarks.positions
    pattern_ids = landmarks.ids[landmarks.pattern]
    pattern_prev = {int(b): int(a) for a, b in zip(pattern_ids[:-1], pattern_ids[1:])}

    cols = {k: [] for k in ("frame", "cam", "lm", "px", "depth", "true")}
    for f, t in enumerate(gt.timestamps):
        if any(t0 - _TIME_EPS <= t <= t1 + _TIME_EPS for t0, t1 in config.dropouts):
            continue
        R_wc0 = gt.rotations[f] @ T_bc0.R
        p_wc0 = gt.rotations[f] @ T_bc0.translation + gt.positions[f]
        pc0 = (P - p_wc0) @ R_wc0
        z0 = pc0[:, 2]
        front = (z0 > 0.5) & (z0 < config.max_range_m)
        idx = np.nonzero(front)[0]
        if len(idx) == 0:
            continue
        pc0 = pc0[idx]
        px0 = K.fx * pc0[:, 0] / pc0[:, 2] + K.cx, K.fy * pc0[:, 1] / pc0[:, 2] + K.cy
        px0 = np.column_stack(px0)
        vis = K.contains(px0)
        idx, pc0, px0 = idx[vis], pc0[vis], px0[vis]
        n = len(idx)
        noisy0 = px0 + sigma * rng.standard_normal((n, 2))

        pc1 = (pc0 - t_c0c1) @ R_c0c1
        with np.errstate(divide="ignore", invalid="ignore"):
            px1 = np.column_stack([K.fx * pc1[:, 0] / pc1[:, 2] + K.cx,
                                   K.fy * pc1[:, 1] / pc1[:, 2] + K.cy])
        stereo = (pc1[:, 2] > 0.5) & K.contains(px1) & (pc0[:, 2] < stereo_range)
        noisy1 = px1 + sigma * rng.standard_normal((n, 2))

        keep0 = ~_in_mask(noisy0, config.mask)
        stereo &= keep0 & ~_in_mask(noisy1, config.mask)

        labels = landmarks.ids[idx].copy()
        if config.aliasing_mismatch_prob > 0 and len(pattern_prev):
            swap = mismatch_rng.random(n) < config.aliasing_mismatch_prob
            for j in np.nonzero(swap & landmarks.pattern[idx])[0]:
                labels[j] = pattern_prev.get(int(labels[j]), labels[j])

        for j in range(n):
            if not keep0[j]:
                continue
            depth = np.nan
            if stereo[j]:
                try:
                    _, depth = triangulate_stereo(rig_rep, K, K, noisy0[j], noisy1[j])
                except DegenerateRay:
                    stereo[j] = False
            cols["frame"].append(f)
            cols["cam"].append(0)
            cols["lm"].append(labels[j])
            cols["px"].append(noisy0[j])
            cols["depth"].append(depth)
            cols["true"].append(landmarks.ids[idx[j]])
            if stereo[j]:
                cols["frame"].append(f)
                cols["cam"].append(1)
                cols["lm"].append(labels[j])
                cols["px"].append(noisy1[j])
                cols["depth"].append(np.nan)
                cols["true"].append(landmarks.ids[idx[j]])

    if imu is None:
        imu = ImuData(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    v0_body = gt.rotations[0].T @ gt.velocities[0]
    return SensorLog(
        imu=imu,
        frame_times=gt.timestamps.copy(),
        frame_ids=np.arange(len(gt), dtype=np.int64),
        obs_frame=np.asarray(cols["frame"], dtype=np.int64),
        obs_cam=np.asarray(cols["cam"], dtype=np.int64),
        obs_landmark=np.asarray(cols["lm"], dtype=np.int64),
        obs_px=np.asarray(cols["px"], dtype=float).reshape(-1, 2),
        obs_depth=np.asarray(cols["depth"], dtype=float),
        obs_true_landmark=np.asarray(cols["true"], dtype=np.int64),
        intrinsics=K,
        rig=rig_rep,
        T_body_cam0=T_bc0,
        imu_spec=config.imu,
        gravity=config.gravity,
        initial_velocity_body=v0_body,
    )


@dataclass
class Simulation:
    config: ScenarioConfig
    path: RailPath
    ground_truth: GroundTruth       # at camera frame times
    imu_truth: GroundTruth          # at IMU sample times
    landmarks: LandmarkSet
    log: SensorLog


def simulate(config: ScenarioConfig) -> Simulation:
    """Run the full generation chain with one RNG stream per stage."""
    rng_lm, rng_imu, rng_px, rng_mm = config.rngs()
    path = build_path(config.path)
    gt_imu = sample_trajectory(path, config.speed, config.imu.rate_hz)
    gt_cam = sample_trajectory(path, config.speed, config.camera_rate_hz)
    imu = generate_imu(gt_imu, config.imu, rng_imu, config.gravity)
    landmarks = generate_landmarks(config, path, rng_lm)
    log = render_observations(gt_cam, landmarks, config, imu, rng_px, rng_mm)
    return Simulation(config, path, gt_cam, gt_imu, landmarks, log)


def straight_scenario(length=200.0, speed=10.0, seed=0, **kw) -> ScenarioConfig:
    """Convenience: constant speed on a straight track long enough for the profile."""
    duration = length / speed
    return ScenarioConfig(seed=seed, path=PathSpec((Straight(length + 1.0),)),
                          speed=SpeedProfileSpec((Hold(speed, duration),)), **kw)


def mismatch_fraction(log: SensorLog, pattern_ids: Sequence[int]) -> float:
    pat = np.isin(log.obs_true_landmark, np.asarray(pattern_ids)) & (log.obs_cam == 0)
    if not np.any(pat):
        return 0.0
    return float(np.mean(log.obs_landmark[pat] != log.obs_true_landmark[pat]))
