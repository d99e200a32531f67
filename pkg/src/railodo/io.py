"""Plain-text file formats and the key=value configuration parser.

Log directory layout (written by ``write_log``):

    imu.txt            timestamp gx gy gz ax ay az
    frames.txt         timestamp frame_id
    observations.txt   frame_ts frame_id cam_id landmark_id u v [depth]
    calibration.cfg    key=value intrinsics, rig, body-camera transform, IMU noise
    groundtruth.txt    timestamp tx ty tz qx qy qz qw (camera-rate ground truth)

All numbers are written with ``repr`` precision so a round trip is exact.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LogParseError
from .geometry import CameraIntrinsics, Pose, StereoRig
from .evaluation import Trajectory
from .simulator import GRAVITY, ImuData, ImuSpec, SensorLog

IMU_FILE = "imu.txt"
FRAMES_FILE = "frames.txt"
OBS_FILE = "observations.txt"
CALIB_FILE = "calibration.cfg"
GT_FILE = "groundtruth.txt"


def _num(x) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- #
# Generic table reading
# --------------------------------------------------------------------------- #

def _rows(path, min_cols, max_cols=None):
    """Yield (line number, float fields) for every data line of a whitespace table."""
    max_cols = min_cols if max_cols is None else max_cols
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LogParseError(f"cannot read file: {exc.strerror}", path=str(path)) from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if not min_cols <= len(parts) <= max_cols:
            want = str(min_cols) if min_cols == max_cols else f"{min_cols}-{max_cols}"
            raise LogParseError(f"expected {want} fields, found {len(parts)}", path=str(path), line=n)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not _is_float(p))
            raise LogParseError(f"not a number: {bad!r}", path=str(path), line=n) from None
        if not all(np.isfinite(vals)):
            raise LogParseError("non-finite value", path=str(path), line=n)
        yield n, vals


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _check_increasing(path, lines, t, what="timestamps"):
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if len(bad):
        raise LogParseError(f"{what} must be strictly increasing", path=str(path), line=lines[bad[0] + 1])


# --------------------------------------------------------------------------- #
# Trajectories
# --------------------------------------------------------------------------- #

def format_trajectory(traj: Trajectory, header=True) -> str:
    out = ["# timestamp tx ty tz qx qy qz qw"] if header else []
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        out.append(" ".join(_num(x) for x in (t, *p, *q)))
    return "\n".join(out) + "\n"


def write_trajectory(path, traj: Trajectory):
    Path(path).write_text(format_trajectory(traj))


def read_trajectory(path) -> Trajectory:
    lines, rows = [], []
    for n, vals in _rows(path, 8):
        lines.append(n)
        rows.append(vals)
    if len(rows) < 2:
        raise LogParseError("a trajectory needs at least two poses", path=str(path))
    a = np.array(rows)
    _check_increasing(path, lines, a[:, 0])
    q = a[:, 4:8]
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < 1e-6):
        raise LogParseError("zero quaternion", path=str(path), line=lines[int(np.argmin(norms))])
    return Trajectory(a[:, 0], a[:, 1:4], q / norms[:, None])


# --------------------------------------------------------------------------- #
# key=value configuration
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ConfigValue:
    value: str
    line: int
    source: str = "<config>"


class ConfigDict(dict):
    """Parsed key=value file; remembers where each key came from for diagnostics."""

    source = "<config>"

    def error(self, key, message):
        v = dict.get(self, key)
        line = v.line if v is not None and v.line > 0 else None
        src = v.source if v is not None else self.source
        loc = f"{src}:{line}: " if line is not None else f"{src}: "
        return ConfigError(f"{loc}{key}: {message}", key=key, line=line)

    def raw(self, key, default=None):
        v = dict.get(self, key)
        return default if v is None else v.value

    def float(self, key, default=None):
        v = dict.get(self, key)
        if v is None:
            if default is None:
                raise self.error(key, "missing required key")
            return float(default)
        try:
            return float(v.value)
        except ValueError:
            raise self.error(key, f"expected a number, got {v.value!r}") from None

    def int(self, key, default=None):
        v = dict.get(self, key)
        if v is None:
            if default is None:
                raise self.error(key, "missing required key")
            return int(default)
        try:
            return int(v.value)
        except ValueError:
            raise self.error(key, f"expected an integer, got {v.value!r}") from None

    def floats(self, key, n=None, default=None):
        v = dict.get(self, key)
        if v is None:
            if default is None:
                raise self.error(key, "missing required key")
            return tuple(default)
        try:
            vals = tuple(float(x) for x in v.value.replace(",", " ").split())
        except ValueError:
            raise self.error(key, f"expected numbers, got {v.value!r}") from None
        if n is not None and len(vals) != n:
            raise self.error(key, f"expected {n} values, got {len(vals)}")
        if not vals and n is None:
            raise self.error(key, "empty list")
        return vals

    def bool(self, key, default=False):
        v = dict.get(self, key)
        if v is None:
            return default
        s = v.value.lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise self.error(key, f"expected a boolean, got {v.value!r}")

    def check_known(self, known):
        """Reject keys outside ``known`` (exact names or prefixes ending in '.')."""
        for key in self:
            if key in known or any(k.endswith(".") and key.startswith(k) for k in known):
                continue
            raise self.error(key, "unknown key")

    def subset(self, prefix):
        """Keys under ``prefix.`` with the prefix stripped."""
        out = ConfigDict()
        out.source = self.source
        for k, v in self.items():
            if k.startswith(prefix + "."):
                dict.__setitem__(out, k[len(prefix) + 1:], v)
        return out

    def updated(self, values: dict, source="<override>"):
        """Copy with ``values`` (plain strings) layered on top."""
        out = ConfigDict()
        out.source = self.source
        dict.update(out, self)
        for k, v in values.items():
            dict.__setitem__(out, k, ConfigValue(str(v), 0, source))
        return out


def parse_config(text: str, source="<config>") -> ConfigDict:
    """Parse flat ``key = value`` lines. ``[section]`` headers prefix later keys with ``section.``."""
    out = ConfigDict()
    out.source = source
    section = ""
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section or " " in section:
                raise ConfigError(f"{source}:{n}: bad section header {line!r}", line=n)
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}", line=n)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{n}: bad key {key!r}", line=n)
        if section:
            key = f"{section}.{key}"
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first on line {out[key].line})",
                              key=key, line=n)
        dict.__setitem__(out, key, ConfigValue(value, n, source))
    return out


def read_config(path) -> ConfigDict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from exc
    return parse_config(text, str(path))


def format_config(items) -> str:
    """Render ``(key, value)`` pairs; values that are sequences become comma lists."""
    out = []
    for k, v in items:
        if isinstance(v, (tuple, list, np.ndarray)):
            v = ", ".join(_num(x) for x in v)
        elif isinstance(v, float):
            v = _num(v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------- #
# Sensor logs
# --------------------------------------------------------------------------- #

CALIB_KEYS = ("camera.fx", "camera.fy", "camera.cx", "camera.cy", "camera.width", "camera.height",
              "rig.translation", "rig.quaternion", "body_cam0.translation", "body_cam0.quaternion",
              "imu.rate_hz", "imu.gyro_noise_density", "imu.accel_noise_density",
              "imu.gyro_random_walk", "imu.accel_random_walk", "gravity", "initial_velocity_body")


def _calibration_items(log: SensorLog):
    K = log.intrinsics
    rig = log.rig.T_cam0_cam1
    Tb = log.T_body_cam0
    s = log.imu_spec
    return [
        ("camera.fx", K.fx), ("camera.fy", K.fy), ("camera.cx", K.cx), ("camera.cy", K.cy),
        ("camera.width", int(K.width)), ("camera.height", int(K.height)),
        ("rig.translation", rig.translation), ("rig.quaternion", rig.rotation),
        ("body_cam0.translation", Tb.translation), ("body_cam0.quaternion", Tb.rotation),
        ("imu.rate_hz", float(s.rate_hz)),
        ("imu.gyro_noise_density", float(s.gyro_noise_density)),
        ("imu.accel_noise_density", float(s.accel_noise_density)),
        ("imu.gyro_random_walk", float(s.gyro_random_walk)),
        ("imu.accel_random_walk", float(s.accel_random_walk)),
        ("gravity", float(log.gravity)),
        ("initial_velocity_body", log.initial_velocity_body),
    ]


def write_log(directory, log: SensorLog, ground_truth: Trajectory = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imu = log.imu
    lines = ["# timestamp gx gy gz ax ay az"]
    for t, g, a in zip(imu.timestamps, imu.gyro, imu.accel):
        lines.append(" ".join(_num(x) for x in (t, *g, *a)))
    (d / IMU_FILE).write_text("\n".join(lines) + "\n")
    lines = ["# timestamp frame_id"]
    for t, f in zip(log.frame_times, log.frame_ids):
        lines.append(f"{_num(t)} {int(f)}")
    (d / FRAMES_FILE).write_text("\n".join(lines) + "\n")
    times = dict(zip(log.frame_ids.tolist(), log.frame_times.tolist()))
    lines = ["# frame_ts frame_id cam_id landmark_id u v [depth]"]
    for f, c, lm, px, dep in zip(log.obs_frame.tolist(), log.obs_cam.tolist(),
                                 log.obs_landmark.tolist(), log.obs_px, log.obs_depth.tolist()):
        row = f"{_num(times[f])} {f} {c} {lm} {_num(px[0])} {_num(px[1])}"
        if dep == dep:
            row += f" {_num(dep)}"
        lines.append(row)
    (d / OBS_FILE).write_text("\n".join(lines) + "\n")
    (d / CALIB_FILE).write_text(format_config(_calibration_items(log)))
    if ground_truth is not None:
        write_trajectory(d / GT_FILE, ground_truth)


def _pose_from_config(cfg: ConfigDict, prefix):
    t = cfg.floats(prefix + ".translation", 3)
    q = np.array(cfg.floats(prefix + ".quaternion", 4))
    if np.linalg.norm(q) < 1e-6:
        raise cfg.error(prefix + ".quaternion", "zero quaternion")
    return Pose(q, t)


def read_calibration(path):
    cfg = read_config(path)
    cfg.check_known(CALIB_KEYS)
    try:
        K = CameraIntrinsics(cfg.float("camera.fx"), cfg.float("camera.fy"), cfg.float("camera.cx"),
                             cfg.float("camera.cy"), cfg.int("camera.width"), cfg.int("camera.height"))
        rig = StereoRig(_pose_from_config(cfg, "rig"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    T_bc0 = _pose_from_config(cfg, "body_cam0")
    spec = ImuSpec(rate_hz=cfg.float("imu.rate_hz"),
                   gyro_noise_density=cfg.float("imu.gyro_noise_density"),
                   accel_noise_density=cfg.float("imu.accel_noise_density"),
                   gyro_random_walk=cfg.float("imu.gyro_random_walk"),
                   accel_random_walk=cfg.float("imu.accel_random_walk"))
    return dict(intrinsics=K, rig=rig, T_body_cam0=T_bc0, imu_spec=spec,
                gravity=cfg.float("gravity", GRAVITY),
                initial_velocity_body=np.array(cfg.floats("initial_velocity_body", 3, (0.0, 0.0, 0.0))))


def read_log(directory) -> SensorLog:
    """Load a log directory; malformed lines raise LogParseError with file and line."""
    d = Path(directory)
    if not d.is_dir():
        raise LogParseError("log directory not found", path=str(d))
    calib = read_calibration(d / CALIB_FILE)

    lines, rows = [], []
    for n, vals in _rows(d / IMU_FILE, 7):
        lines.append(n)
        rows.append(vals)
    a = np.array(rows).reshape(-1, 7)
    _check_increasing(d / IMU_FILE, lines, a[:, 0])
    imu = ImuData(a[:, 0], a[:, 1:4], a[:, 4:7])

    lines, rows = [], []
    for n, vals in _rows(d / FRAMES_FILE, 2):
        if vals[1] != int(vals[1]) or vals[1] < 0:
            raise LogParseError("frame id must be a non-negative integer", path=str(d / FRAMES_FILE), line=n)
        lines.append(n)
        rows.append(vals)
    if not rows:
        raise LogParseError("no frames", path=str(d / FRAMES_FILE))
    fr = np.array(rows)
    _check_increasing(d / FRAMES_FILE, lines, fr[:, 0])
    frame_times = fr[:, 0]
    frame_ids = fr[:, 1].astype(np.int64)
    _check_increasing(d / FRAMES_FILE, lines, frame_ids, "frame ids")
    by_id = dict(zip(frame_ids.tolist(), frame_times.tolist()))

    obs_path = d / OBS_FILE
    f_, c_, lm_, px_, dep_ = [], [], [], [], []
    last_frame = -1
    for n, vals in _rows(obs_path, 6, 7):
        t, fid, cam, lm = vals[:4]
        if fid != int(fid) or cam not in (0.0, 1.0) or lm != int(lm):
            raise LogParseError("frame id, camera id (0 or 1) and landmark id must be integers",
                                path=str(obs_path), line=n)
        fid = int(fid)
        if fid not in by_id:
            raise LogParseError(f"observation references unknown frame {fid}", path=str(obs_path), line=n)
        if abs(by_id[fid] - t) > 1e-6:
            raise LogParseError(f"frame_ts does not match frame {fid}", path=str(obs_path), line=n)
        if fid < last_frame:
            raise LogParseError("observations must be grouped by frame in time order",
                                path=str(obs_path), line=n)
        last_frame = fid
        f_.append(fid)
        c_.append(int(cam))
        lm_.append(int(lm))
        px_.append(vals[4:6])
        dep = vals[6] if len(vals) == 7 else np.nan
        if dep == dep and (cam != 0 or dep <= 0):
            raise LogParseError("depth allowed only on camera-0 rows and must be positive",
                                path=str(obs_path), line=n)
        dep_.append(dep)
    lm_arr = np.asarray(lm_, dtype=np.int64)
    return SensorLog(
        imu=imu, frame_times=frame_times, frame_ids=frame_ids,
        obs_frame=np.asarray(f_, dtype=np.int64), obs_cam=np.asarray(c_, dtype=np.int64),
        obs_landmark=lm_arr, obs_px=np.asarray(px_, dtype=float).reshape(-1, 2),
        obs_depth=np.asarray(dep_, dtype=float), obs_true_landmark=lm_arr.copy(),
        intrinsics=calib["intrinsics"], rig=calib["rig"], T_body_cam0=calib["T_body_cam0"],
        imu_spec=calib["imu_spec"], gravity=calib["gravity"],
        initial_velocity_body=calib["initial_velocity_body"])


# --------------------------------------------------------------------------- #
# Diagnostics
# --------------------------------------------------------------------------- #

DIAG_FIELDS = ("frame_id", "timestamp", "n_observations", "n_tracked", "n_landmarks", "n_reprojection",
               "n_depth", "n_depth_gated", "iterations", "converged", "gap", "window")


def format_diagnostics(diagnostics) -> str:
    out = [",".join(DIAG_FIELDS)]
    for dg in diagnostics:
        vals = []
        for f in DIAG_FIELDS:
            v = getattr(dg, f)
            if isinstance(v, bool):
                vals.append(str(int(v)))
            elif isinstance(v, float):
                vals.append(f"{v:.6f}")
            else:
                vals.append(str(v))
        out.append(",".join(vals))
    return "\n".join(out) + "\n"


def write_diagnostics(path, diagnostics):
    Path(path).write_text(format_diagnostics(diagnostics))


def read_diagnostics(path):
    """Rows of the diagnostics CSV as dicts of ints (timestamp as float)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].split(",") != list(DIAG_FIELDS):
        raise LogParseError("bad diagnostics header", path=str(path), line=1)
    out = []
    for n, line in enumerate(text[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(DIAG_FIELDS):
            raise LogParseError("wrong field count", path=str(path), line=n)
        out.append({f: (float(p) if f == "timestamp" else int(p)) for f, p in zip(DIAG_FIELDS, parts)})
    return out


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
