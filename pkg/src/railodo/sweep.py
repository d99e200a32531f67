"""Seeds x modes x baselines grid: simulate, estimate, evaluate, merge.

One cell is a (seed, baseline) pair; it simulates once and runs every mode on
the same log. Cells are independent and run in a process pool whose size is
capped by the RAILODO_THREADS environment variable. Results are merged in a
fixed order so the report does not depend on scheduling.
"""
from __future__ import annotations

import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import io
from .config import RunManifest
from .errors import RailOdoError
from .estimator import run_estimator
from .evaluation import EvalReport, ReportRow, evaluate, merge_reports, render_csv, render_table
from .simulator import simulate


@dataclass
class ModeOutcome:
    seed: int
    baseline: float
    mode: str
    report: Optional[EvalReport]
    error: str = ""


def cell_dir(out: Path, seed, baseline) -> Path:
    return Path(out) / "cells" / f"b{baseline:.2f}_s{seed}"


def run_cell(manifest: RunManifest, seed: int, baseline: float) -> list:
    d = cell_dir(manifest.out, seed, baseline)
    out = []
    try:
        sim = simulate(manifest.scenario_for(seed, baseline))
        gt = sim.ground_truth.to_trajectory()
        io.write_log(d / "log", sim.log, gt)
    except (RailOdoError, ValueError) as exc:
        return [ModeOutcome(seed, baseline, m, None, f"simulate: {exc}") for m in manifest.modes]
    for mode in manifest.modes:
        try:
            res = run_estimator(sim.log, manifest.estimator_for(mode))
            io.write_trajectory(d / f"{mode}.txt", res.trajectory)
            io.write_diagnostics(d / f"{mode}.diagnostics.csv", res.diagnostics)
            rep = evaluate(res.trajectory, gt, manifest.segment_lengths)
            out.append(ModeOutcome(seed, baseline, mode, rep))
        except (RailOdoError, ValueError, ArithmeticError, MemoryError) as exc:
            out.append(ModeOutcome(seed, baseline, mode, None, f"{type(exc).__name__}: {exc}"))
    return out


def _run_cell_safe(args):
    manifest, seed, baseline = args
    try:
        return run_cell(manifest, seed, baseline)
    except Exception as exc:  # a worker must always report back
        msg = f"{type(exc).__name__}: {exc}"
        tb = traceback.format_exc(limit=3)
        return [ModeOutcome(seed, baseline, m, None, msg + "\n" + tb) for m in manifest.modes]


def max_workers(n_cells) -> int:
    env = os.environ.get("RAILODO_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ValueError(f"RAILODO_THREADS must be a positive integer, got {env!r}") from None
    return max(1, min(cap, n_cells))


@dataclass
class SweepResult:
    outcomes: list
    table: str
    csv: str
    per_mode_csv: dict

    @property
    def n_ok(self):
        return sum(o.report is not None for o in self.outcomes)


def merge(manifest: RunManifest, outcomes) -> SweepResult:
    key = {(o.mode, o.baseline, o.seed): o for o in outcomes}
    rows, run_rows = [], []
    failures = []
    for mode in manifest.modes:
        for b in manifest.baselines:
            reps = []
            for s in manifest.seeds:
                o = key[(mode, b, s)]
                if o.report is None:
                    failures.append(f"{mode} baseline {b:.2f} m seed {s}: {o.error.splitlines()[0]}")
                    continue
                reps.append(o.report)
                run_rows.append(ReportRow(mode, b, o.report, run=f"seed{s}"))
            rows.append(ReportRow(mode, b, merge_reports(reps) if reps else None, run="pooled"))
    table = render_table(rows, manifest.segment_lengths)
    header = f"# {manifest.name}: seeds {', '.join(str(s) for s in manifest.seeds)}\n"
    if failures:
        table += "\nfailed runs:\n" + "\n".join("  " + f for f in failures) + "\n"
    csv = render_csv(run_rows)
    per_mode = {m: render_csv([r for r in run_rows if r.mode == m]) for m in manifest.modes}
    return SweepResult(outcomes, header + table, csv, per_mode)


def run_sweep(manifest: RunManifest, workers: Optional[int] = None) -> SweepResult:
    cells = [(manifest, s, b) for b in manifest.baselines for s in manifest.seeds]
    n = max_workers(len(cells)) if workers is None else max(1, workers)
    if n == 1:
        results = [_run_cell_safe(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_cell_safe, cells))
    outcomes = [o for r in results for o in r]
    res = merge(manifest, outcomes)
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(res.table)
    (out / "segments.csv").write_text(res.csv)
    for mode, text in res.per_mode_csv.items():
        (out / f"errors_{mode}.csv").write_text(text)
    return res
