"""Command line: simulate, estimate, evaluate, sweep.

Exit codes: 0 ok, 2 input error, 3 solver or run error, 4 evaluation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import io
from .config import load_estimator, load_manifest, load_scenario
from .errors import (ConfigError, DegenerateAlignment, EmptyErrorSet, InsufficientObservations,
                     LogParseError, NoOverlap, RailOdoError, SolverDiverged, TrajectoryTooShort)
from .estimator import MODES, EstimatorConfig, run_estimator
from .evaluation import ReportRow, evaluate, render_report
from .simulator import simulate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUN = 3
EXIT_EVAL = 4


class UsageError(Exception):
    pass


def _floats(text, n=None, what="values"):
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"bad {what}: {text!r}") from None
    if not vals or (n is not None and len(vals) != n):
        raise UsageError(f"expected {n or 'some'} {what}, got {text!r}")
    return vals


def _fail(code, msg):
    print(f"railodo: {msg}", file=sys.stderr)
    return code


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_simulate(args):
    over = {}
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.baseline is not None:
        over["stereo.baseline_m"] = repr(args.baseline)
    cfg = load_scenario(args.config, over)
    sim = simulate(cfg)
    io.write_log(args.out, sim.log, sim.ground_truth.to_trajectory())
    print(f"wrote {sim.log.n_frames} frames, {len(sim.log.imu)} IMU samples, "
          f"{len(sim.log.obs_frame)} observations to {args.out}")
    return EXIT_OK


def cmd_estimate(args):
    base = EstimatorConfig()
    cfg = load_estimator(args.config, base) if args.config else base
    kw = {}
    if args.mode:
        kw["mode"] = args.mode
    if args.mask:
        kw["mask"] = _floats(args.mask, 4, "mask values")
    if args.batch:
        kw["batch"] = True
    if args.window is not None:
        kw["window_size"] = args.window
    try:
        cfg = dataclasses.replace(cfg, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log = io.read_log(args.log)
    res = run_estimator(log, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_trajectory(out, res.trajectory)
    diag = Path(args.diagnostics) if args.diagnostics else out.with_suffix(".diagnostics.csv")
    io.write_diagnostics(diag, res.diagnostics)
    t = res.totals()
    print(f"{cfg.mode}: {len(res.timestamps)} poses, {t['reprojection_residuals']} reprojection and "
          f"{t['depth_residuals']} depth residuals, {t['gaps']} gap frames")
    return EXIT_OK


def cmd_evaluate(args):
    lengths = _floats(args.segment_lengths, what="segment lengths")
    if any(L <= 0 for L in lengths):
        raise UsageError("segment lengths must be positive")
    est = io.read_trajectory(args.est)
    gt = io.read_trajectory(args.gt)
    rep = evaluate(est, gt, lengths, max_dt=args.max_dt)
    if all(st.count == 0 for st in rep.stats.values()):
        raise EmptyErrorSet("every segment was skipped")
    table, csv = render_report([ReportRow(args.label, None, rep, run=args.label)], lengths)
    if args.out:
        d = io.ensure_dir(args.out)
        (d / "report.txt").write_text(table)
        (d / "segments.csv").write_text(csv)
    print(table, end="")
    return EXIT_OK


def cmd_sweep(args):
    from .sweep import run_sweep
    m = load_manifest(args.config)
    if args.out:
        m.out = Path(args.out)
    res = run_sweep(m, workers=args.jobs)
    print(res.table, end="")
    if res.n_ok == 0:
        return _fail(EXIT_RUN, "every sweep cell failed")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def build_parser():
    p = argparse.ArgumentParser(prog="railodo", description="Rail visual-inertial odometry workbench.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a sensor log and ground truth from a scenario file")
    s.add_argument("--config", required=True, help="scenario key=value file")
    s.add_argument("--out", required=True, help="output log directory")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--baseline", type=float, help="override the stereo baseline (m)")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="run the sliding-window estimator on a log directory")
    e.add_argument("--log", required=True, help="log directory written by 'simulate'")
    e.add_argument("--out", required=True, help="estimated trajectory file")
    e.add_argument("--config", help="estimator key=value file")
    e.add_argument("--mode", choices=MODES, help="sensor mode (default stereo-inertial)")
    e.add_argument("--mask", help="pixel mask 'u0,v0,u1,v1' applied to both cameras")
    e.add_argument("--window", type=int, help="sliding window size")
    e.add_argument("--batch", action="store_true", help="full-batch refinement after the sliding pass")
    e.add_argument("--diagnostics", help="diagnostics CSV (default: next to --out)")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="segment-based distance and heading errors")
    v.add_argument("--est", required=True, help="estimated trajectory file")
    v.add_argument("--gt", required=True, help="ground-truth trajectory file")
    v.add_argument("--segment-lengths", default="10,50", help="comma separated lengths in m")
    v.add_argument("--max-dt", type=float, default=0.025, help="association tolerance (s)")
    v.add_argument("--label", default="estimate", help="row label in the report")
    v.add_argument("--out", help="directory for report.txt and segments.csv")
    v.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="run a seeds x modes x baselines manifest")
    w.add_argument("--config", required=True, help="manifest key=value file")
    w.add_argument("--out", help="override the manifest output directory")
    w.add_argument("--jobs", type=int, help="worker processes (default: RAILODO_THREADS or CPU count)")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LogParseError, UsageError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    except SolverDiverged as exc:
        where = f" at frame {exc.frame_index}" if exc.frame_index is not None else ""
        return _fail(EXIT_RUN, f"solver diverged{where}: {exc}")
    except InsufficientObservations as exc:
        return _fail(EXIT_RUN, str(exc))
    except (NoOverlap, TrajectoryTooShort, EmptyErrorSet, DegenerateAlignment) as exc:
        return _fail(EXIT_EVAL, f"{type(exc).__name__}: {exc}")
    except RailOdoError as exc:
        return _fail(EXIT_RUN, f"{type(exc).__name__}: {exc}")
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))


if __name__ == "__main__":
    sys.exit(main())
