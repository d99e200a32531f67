"""Scenario, estimator and sweep-manifest configuration from key=value files.

Scenario keys (``[section]`` headers may replace the dotted prefixes):

    seed                         mandatory integer
    path                         "straight 250; arc 2000 0.1; straight 200"  (arc: radius m, angle rad)
    path.height                  m
    speed                        "ramp 10 14 5; hold 14 65"  (hold: speed s; ramp: from to duration)
    imu.rate_hz, imu.gyro_noise_density, imu.accel_noise_density,
    imu.gyro_random_walk, imu.accel_random_walk, imu.initial_gyro_bias, imu.initial_accel_bias
    camera.rate_hz, camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
    camera.pixel_noise_px, camera.max_range_m, camera.body_offset_m
    stereo.baseline_m, stereo.range_factor
    landmarks.density_per_m
    aliasing.period_m, aliasing.mismatch_prob
    dropouts                     "5 6, 10 11"  (pairs t0 t1, comma separated)
    mask                         "u0, v0, u1, v1"
    extrinsic.rotation_rad, extrinsic.translation_m, extrinsic.reference_baseline_m
    gravity
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .estimator import MODES, EstimatorConfig
from .geometry import CameraIntrinsics
from .io import ConfigDict, parse_config, read_config
from .simulator import GRAVITY, Arc, Hold, ImuSpec, PathSpec, Ramp, ScenarioConfig, SpeedProfileSpec, Straight

SCENARIO_KEYS = (
    "name", "seed", "path", "path.height", "speed",
    "imu.rate_hz", "imu.gyro_noise_density", "imu.accel_noise_density", "imu.gyro_random_walk",
    "imu.accel_random_walk", "imu.initial_gyro_bias", "imu.initial_accel_bias",
    "camera.rate_hz", "camera.fx", "camera.fy", "camera.cx", "camera.cy", "camera.width",
    "camera.height", "camera.pixel_noise_px", "camera.max_range_m", "camera.body_offset_m",
    "stereo.baseline_m", "stereo.range_factor", "landmarks.density_per_m",
    "aliasing.period_m", "aliasing.mismatch_prob", "dropouts", "mask",
    "extrinsic.rotation_rad", "extrinsic.translation_m", "extrinsic.reference_baseline_m", "gravity",
)

ESTIMATOR_KEYS = tuple(f.name for f in dataclasses.fields(EstimatorConfig) if f.name != "imu_noise")

MANIFEST_KEYS = ("name", "scenario", "estimator", "out", "seeds", "modes", "baselines",
                 "segment_lengths", "override.", "estimator.")


def _elements(cfg: ConfigDict, key, kinds):
    text = cfg.raw(key)
    if text is None:
        raise cfg.error(key, "missing required key")
    out = []
    for chunk in text.split(";"):
        parts = chunk.split()
        if not parts:
            continue
        kind = parts[0].lower()
        if kind not in kinds:
            raise cfg.error(key, f"unknown element {parts[0]!r} (expected one of {', '.join(kinds)})")
        cls, n = kinds[kind]
        if len(parts) - 1 != n:
            raise cfg.error(key, f"{kind} takes {n} numbers, got {len(parts) - 1}")
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError:
            raise cfg.error(key, f"bad number in {chunk.strip()!r}") from None
        out.append(cls(*vals))
    if not out:
        raise cfg.error(key, "no elements")
    return tuple(out)


def _dropouts(cfg: ConfigDict):
    text = cfg.raw("dropouts")
    if text is None or not text.strip():
        return ()
    out = []
    for chunk in text.split(","):
        parts = chunk.split()
        try:
            t0, t1 = (float(x) for x in parts)
        except ValueError:
            raise cfg.error("dropouts", f"expected 't0 t1' pairs, got {chunk.strip()!r}") from None
        out.append((t0, t1))
    return tuple(out)


def scenario_from_config(cfg: ConfigDict) -> ScenarioConfig:
    """Build a ScenarioConfig; every problem is a ConfigError naming the key and line."""
    cfg.check_known(SCENARIO_KEYS)
    if "seed" not in cfg:
        raise cfg.error("seed", "missing required key")
    seed = cfg.int("seed")
    d = ScenarioConfig.__dataclass_fields__
    di = ImuSpec()
    dk = CameraIntrinsics.default()

    def dflt(name):
        return d[name].default

    try:
        path = PathSpec(_elements(cfg, "path", {"straight": (Straight, 1), "arc": (Arc, 2)}),
                        cfg.float("path.height", 2.5))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise cfg.error("path", str(exc)) from None
    try:
        speed = SpeedProfileSpec(_elements(cfg, "speed", {"hold": (Hold, 2), "ramp": (Ramp, 3)}))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise cfg.error("speed", str(exc)) from None

    def build(key, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except ValueError as exc:
            raise cfg.error(key, str(exc)) from None

    imu = build("imu.rate_hz", lambda: ImuSpec(
        rate_hz=cfg.float("imu.rate_hz", di.rate_hz),
        gyro_noise_density=cfg.float("imu.gyro_noise_density", di.gyro_noise_density),
        accel_noise_density=cfg.float("imu.accel_noise_density", di.accel_noise_density),
        gyro_random_walk=cfg.float("imu.gyro_random_walk", di.gyro_random_walk),
        accel_random_walk=cfg.float("imu.accel_random_walk", di.accel_random_walk),
        initial_gyro_bias=cfg.floats("imu.initial_gyro_bias", 3, di.initial_gyro_bias),
        initial_accel_bias=cfg.floats("imu.initial_accel_bias", 3, di.initial_accel_bias)))
    K = build("camera.fx", lambda: CameraIntrinsics(
        cfg.float("camera.fx", dk.fx), cfg.float("camera.fy", dk.fy), cfg.float("camera.cx", dk.cx),
        cfg.float("camera.cy", dk.cy), cfg.int("camera.width", dk.width),
        cfg.int("camera.height", dk.height)))
    mask = cfg.floats("mask", 4) if "mask" in cfg else None
    return build("camera.rate_hz", lambda: ScenarioConfig(
        seed=seed, path=path, speed=speed, imu=imu,
        camera_rate_hz=cfg.float("camera.rate_hz", dflt("camera_rate_hz")),
        intrinsics=K,
        baseline_m=cfg.float("stereo.baseline_m", dflt("baseline_m")),
        pixel_noise_px=cfg.float("camera.pixel_noise_px", dflt("pixel_noise_px")),
        landmark_density_per_m=cfg.float("landmarks.density_per_m", dflt("landmark_density_per_m")),
        stereo_range_factor=cfg.float("stereo.range_factor", dflt("stereo_range_factor")),
        max_range_m=cfg.float("camera.max_range_m", dflt("max_range_m")),
        aliasing_period_m=cfg.float("aliasing.period_m", dflt("aliasing_period_m")),
        aliasing_mismatch_prob=cfg.float("aliasing.mismatch_prob", dflt("aliasing_mismatch_prob")),
        dropouts=_dropouts(cfg),
        mask=mask,
        extrinsic_rotation_rad=cfg.float("extrinsic.rotation_rad", dflt("extrinsic_rotation_rad")),
        extrinsic_translation_m=cfg.float("extrinsic.translation_m", dflt("extrinsic_translation_m")),
        extrinsic_reference_baseline_m=cfg.float("extrinsic.reference_baseline_m",
                                                 dflt("extrinsic_reference_baseline_m")),
        body_cam_offset_m=cfg.floats("camera.body_offset_m", 3, dflt("body_cam_offset_m")),
        gravity=cfg.float("gravity", GRAVITY)))


def load_scenario(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    cfg = read_config(path)
    if overrides:
        cfg = cfg.updated(overrides)
    return scenario_from_config(cfg)


def estimator_from_config(cfg: ConfigDict, base: EstimatorConfig = EstimatorConfig()) -> EstimatorConfig:
    """Estimator settings; keys may be bare or under an ``estimator.`` prefix."""
    flat = ConfigDict()
    flat.source = cfg.source
    for k, v in cfg.items():
        dict.__setitem__(flat, k[len("estimator."):] if k.startswith("estimator.") else k, v)
    flat.check_known(ESTIMATOR_KEYS)
    kw = {}
    for f in dataclasses.fields(EstimatorConfig):
        if f.name not in flat:
            continue
        if f.name == "mode":
            kw["mode"] = flat.raw("mode")
            if kw["mode"] not in MODES:
                raise flat.error("mode", f"must be one of {', '.join(MODES)}")
        elif f.name == "mask":
            kw["mask"] = flat.floats("mask", 4)
        elif f.name == "batch":
            kw["batch"] = flat.bool("batch")
        elif f.type in ("int", int):
            kw[f.name] = flat.int(f.name)
        else:
            kw[f.name] = flat.float(f.name)
    try:
        return dataclasses.replace(base, **kw)
    except ValueError as exc:
        key = next(iter(kw), "mode")
        raise flat.error(key, str(exc)) from None


def load_estimator(path, base: EstimatorConfig = EstimatorConfig()) -> EstimatorConfig:
    return estimator_from_config(read_config(path), base)


@dataclass
class RunManifest:
    scenario: Path
    out: Path
    seeds: tuple
    modes: tuple
    baselines: tuple
    segment_lengths: tuple = (10.0, 50.0)
    estimator: Optional[Path] = None
    scenario_overrides: dict = field(default_factory=dict)
    estimator_overrides: dict = field(default_factory=dict)
    name: str = "sweep"

    def scenario_for(self, seed, baseline) -> ScenarioConfig:
        over = dict(self.scenario_overrides)
        over["seed"] = str(int(seed))
        over["stereo.baseline_m"] = repr(float(baseline))
        return load_scenario(self.scenario, over)

    def estimator_for(self, mode) -> EstimatorConfig:
        cfg = read_config(self.estimator) if self.estimator is not None else parse_config("")
        cfg = cfg.updated(self.estimator_overrides).updated({"mode": mode})
        return estimator_from_config(cfg)


def manifest_from_config(cfg: ConfigDict, base_dir=".") -> RunManifest:
    cfg.check_known(MANIFEST_KEYS)
    base = Path(base_dir)

    def resolve(key, required=True):
        v = cfg.raw(key)
        if v is None:
            if required:
                raise cfg.error(key, "missing required key")
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p

    scenario = resolve("scenario")
    if not scenario.is_file():
        raise cfg.error("scenario", f"file not found: {scenario}")
    est = resolve("estimator", required=False)
    if est is not None and not est.is_file():
        raise cfg.error("estimator", f"file not found: {est}")
    out = resolve("out")
    seeds = cfg.floats("seeds")
    if any(s != int(s) for s in seeds):
        raise cfg.error("seeds", "seeds must be integers")
    modes = tuple(m.strip() for m in cfg.raw("modes", "").split(",") if m.strip())
    if not modes:
        raise cfg.error("modes", "missing required key")
    for m in modes:
        if m not in MODES:
            raise cfg.error("modes", f"unknown mode {m!r}")
    baselines = cfg.floats("baselines", default=(0.31,)) if "baselines" in cfg else (0.31,)
    if any(b <= 0 for b in baselines):
        raise cfg.error("baselines", "baselines must be positive")
    lengths = cfg.floats("segment_lengths") if "segment_lengths" in cfg else (10.0, 50.0)
    over = {k[len("override."):]: v.value for k, v in cfg.items() if k.startswith("override.")}
    est_over = {k[len("estimator."):]: v.value for k, v in cfg.items() if k.startswith("estimator.")}
    m = RunManifest(scenario=scenario, out=out, seeds=tuple(int(s) for s in seeds), modes=modes,
                    baselines=tuple(baselines), segment_lengths=tuple(lengths), estimator=est,
                    scenario_overrides=over, estimator_overrides=est_over,
                    name=cfg.raw("name", "sweep"))
    # fail early on bad overrides rather than inside a worker
    m.scenario_for(m.seeds[0], m.baselines[0])
    for mode in modes:
        m.estimator_for(mode)
    return m


def load_manifest(path) -> RunManifest:
    cfg = read_config(path)
    return manifest_from_config(cfg, Path(path).parent)
