"""Segment-based odometry evaluation.

Each ground-truth trajectory is cut into consecutive, non-overlapping pieces
of fixed arc length. The estimate is rigidly aligned on the first tenth of
each piece, then scored by the endpoint gap (percent of the segment length)
and the heading-change error (degrees per meter).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (DegenerateAlignment, EmptyErrorSet, GimbalDegenerate, NoOverlap,
                     TrajectoryTooShort)
from .geometry import Pose, headings, matrix_to_quat, quat_to_matrix_batch, wrap_angle

log = logging.getLogger(__name__)

DEFAULT_MAX_DT = 0.025
ARC_TOL = 1e-9


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray            # (n, 3)
    quaternions: np.ndarray          # (n, 4) scalar-last

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(q) != n:
            raise ValueError("timestamps, positions and quaternions must have equal length")
        if n < 2:
            raise ValueError("a trajectory needs at least two poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if np.any(~np.isfinite(norms)) or np.any(norms < 1e-12):
            raise ValueError("invalid quaternion")
        self.quaternions = q / norms[:, None]

    @classmethod
    def from_rotations(cls, timestamps, positions, rotations):
        q = np.array([matrix_to_quat(R) for R in rotations]).reshape(-1, 4)
        return cls(timestamps, positions, q)

    @classmethod
    def from_poses(cls, timestamps, poses: Sequence[Pose]):
        return cls(timestamps, [p.translation for p in poses], [p.rotation for p in poses])

    def __len__(self):
        return len(self.timestamps)

    @property
    def rotations(self):
        return quat_to_matrix_batch(self.quaternions)

    def pose(self, i) -> Pose:
        return Pose(self.quaternions[i], self.positions[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def transformed(self, T: Pose) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        R = self.rotations
        return Trajectory.from_rotations(self.timestamps, T.apply(self.positions),
                                         np.einsum("ij,njk->nik", T.R, R))

    def arc_length(self):
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class PairedTrajectory:
    timestamps: np.ndarray
    gt_positions: np.ndarray
    gt_rotations: np.ndarray
    est_positions: np.ndarray
    est_rotations: np.ndarray
    n_gt: int
    n_unmatched: int

    def __len__(self):
        return len(self.timestamps)

    def arc_length(self):
        steps = np.linalg.norm(np.diff(self.gt_positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def subset(self, idx):
        return PairedTrajectory(self.timestamps[idx], self.gt_positions[idx], self.gt_rotations[idx],
                                self.est_positions[idx], self.est_rotations[idx],
                                len(self.timestamps[idx]), 0)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> PairedTrajectory:
    """Pair every GT sample with the nearest estimate sample within ``max_dt``."""
    if est.timestamps[-1] < gt.timestamps[0] - max_dt or est.timestamps[0] > gt.timestamps[-1] + max_dt:
        raise NoOverlap("estimate and ground truth do not overlap in time")
    te = est.timestamps
    j = np.searchsorted(te, gt.timestamps)
    lo = np.clip(j - 1, 0, len(te) - 1)
    hi = np.clip(j, 0, len(te) - 1)
    pick = np.where(np.abs(te[lo] - gt.timestamps) <= np.abs(te[hi] - gt.timestamps), lo, hi)
    ok = np.abs(te[pick] - gt.timestamps) <= max_dt + 1e-12
    if not np.any(ok):
        raise NoOverlap(f"no estimate sample within {max_dt} s of any ground-truth sample")
    Rg = gt.rotations
    Re = est.rotations
    return PairedTrajectory(gt.timestamps[ok], gt.positions[ok], Rg[ok], est.positions[pick[ok]],
                            Re[pick[ok]], len(gt), int(np.sum(~ok)))


@dataclass
class Segment:
    start_arclength: float
    length: float
    indices: np.ndarray
    data: PairedTrajectory

    def __len__(self):
        return len(self.indices)


def split_segments(paired: PairedTrajectory, length: float) -> list:
    """Consecutive non-overlapping segments of GT arc length ``length``; the remainder is dropped."""
    if not length > 0:
        raise ValueError("segment length must be positive")
    s = paired.arc_length()
    total = s[-1]
    if total < length - ARC_TOL:
        raise TrajectoryTooShort(f"ground truth covers {total:.3f} m, shorter than {length} m")
    out = []
    k = 0
    start = 0
    while True:
        target = (k + 1) * length
        if s[-1] < target - ARC_TOL:
            break
        end = int(np.searchsorted(s, target - ARC_TOL, side="left"))
        idx = np.arange(start, end + 1)
        out.append(Segment(float(s[start]), float(length), idx, paired.subset(idx)))
        start = end
        k += 1
    return out


@dataclass
class AlignedSegment:
    segment: Segment
    est_positions: np.ndarray
    est_rotations: np.ndarray
    n_align: int
    extended: bool
    transform: Pose


def fit_rigid(src_pos, dst_pos, src_rot=None, dst_rot=None, orientation_weight=1e-3):
    """Rotation and translation taking ``src`` onto ``dst`` in the least-squares sense.

    Positions dominate; a light orientation term resolves the roll about the
    line when the window's positions are collinear.
    """
    ms = src_pos.mean(axis=0)
    md = dst_pos.mean(axis=0)
    a = src_pos - ms
    b = dst_pos - md
    M = a.T @ b
    if src_rot is not None and dst_rot is not None:
        scatter = float(np.sum(a * a)) + float(np.sum(b * b))
        w = orientation_weight * max(scatter, 1e-12)
        M = M + w * np.einsum("nij,nkj->ik", src_rot, dst_rot)
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    t = md - R @ ms
    return R, t


def align_segment(segment: Segment, fraction: float = 0.10) -> AlignedSegment:
    data = segment.data
    n = len(data)
    n_align = int(math.floor(fraction * n + 1e-9))
    extended = n_align < 2
    if extended:
        n_align = min(2, n)
        log.info("alignment window extended to %d samples (segment at %.1f m)",
                 n_align, segment.start_arclength)
    gp = data.gt_positions[:n_align]
    if np.max(np.linalg.norm(gp - gp.mean(axis=0), axis=1)) < 1e-6:
        raise DegenerateAlignment("ground-truth positions of the alignment window coincide")
    R, t = fit_rigid(data.est_positions[:n_align], gp,
                     data.est_rotations[:n_align], data.gt_rotations[:n_align])
    pos = data.est_positions @ R.T + t
    rot = np.einsum("ij,njk->nik", R, data.est_rotations)
    return AlignedSegment(segment, pos, rot, n_align, extended, Pose.from_matrix(R, t))


@dataclass(frozen=True)
class SegmentError:
    start_arclength: float
    length: float
    distance_pct: float
    heading_degpm: float


def segment_errors(aligned: AlignedSegment) -> SegmentError:
    seg = aligned.segment
    L = seg.length
    gt = seg.data
    dist = float(np.linalg.norm(aligned.est_positions[-1] - gt.gt_positions[-1]) / L * 100.0)
    he = headings(aligned.est_rotations[[0, -1]])
    hg = headings(gt.gt_rotations[[0, -1]])
    d_est = wrap_angle(he[1] - he[0])
    d_gt = wrap_angle(hg[1] - hg[0])
    head = float(abs(wrap_angle(d_est - d_gt)) / L * 180.0 / math.pi)
    return SegmentError(seg.start_arclength, L, dist, head)


@dataclass
class LengthStats:
    length: float
    count: int
    skipped: int
    median_distance: Optional[float]
    rmse_distance: Optional[float]
    median_heading: Optional[float]
    rmse_heading: Optional[float]


@dataclass
class EvalReport:
    stats: dict                                   # length -> LengthStats
    segments: dict = field(default_factory=dict)  # length -> list[SegmentError]
    n_matched: int = 0
    n_unmatched: int = 0

    def lengths(self):
        return sorted(self.stats)


def _median(x):
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    mid = n // 2
    return float(x[mid]) if n % 2 else float(0.5 * (x[mid - 1] + x[mid]))


def _rmse(x):
    x = np.asarray(x, dtype=float)
    return float(math.sqrt(np.mean(x * x)))


def aggregate(errors: Sequence[SegmentError], skipped: int = 0, length: Optional[float] = None) -> LengthStats:
    """Median and RMSE of one segment length's errors."""
    errors = list(errors)
    if not errors:
        raise EmptyErrorSet("no segment errors to aggregate")
    if length is None:
        length = errors[0].length
    d = [e.distance_pct for e in errors]
    h = [e.heading_degpm for e in errors]
    return LengthStats(float(length), len(errors), int(skipped), _median(d), _rmse(d),
                       _median(h), _rmse(h))


def evaluate_segments(paired: PairedTrajectory, length: float, fraction=0.10):
    """Errors of every scorable segment plus the number skipped."""
    errs = []
    skipped = 0
    for seg in split_segments(paired, length):
        try:
            errs.append(segment_errors(align_segment(seg, fraction)))
        except (DegenerateAlignment, GimbalDegenerate) as exc:
            log.info("segment at %.1f m skipped: %s", seg.start_arclength, exc)
            skipped += 1
    return errs, skipped


def evaluate(est: Trajectory, gt: Trajectory, lengths=(10.0, 50.0), max_dt=DEFAULT_MAX_DT,
             fraction=0.10) -> EvalReport:
    paired = associate(est, gt, max_dt)
    return evaluate_paired([paired], lengths, fraction)


def evaluate_paired(paired_runs: Sequence[PairedTrajectory], lengths=(10.0, 50.0),
                    fraction=0.10) -> EvalReport:
    """Pool the segments of several runs (e.g. seeds) into one report."""
    stats, segs = {}, {}
    for L in lengths:
        L = float(L)
        errs, skipped = [], 0
        for p in paired_runs:
            e, s = evaluate_segments(p, L, fraction)
            errs.extend(e)
            skipped += s
        segs[L] = errs
        if errs:
            stats[L] = aggregate(errs, skipped, L)
        else:
            stats[L] = LengthStats(L, 0, skipped, None, None, None, None)
    return EvalReport(stats, segs, sum(len(p) for p in paired_runs),
                      sum(p.n_unmatched for p in paired_runs))


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool already computed per-run reports segment by segment."""
    lengths = sorted({L for r in reports for L in r.stats})
    stats, segs = {}, {}
    for L in lengths:
        errs = [e for r in reports for e in r.segments.get(L, [])]
        skipped = sum(r.stats[L].skipped for r in reports if L in r.stats)
        segs[L] = errs
        stats[L] = aggregate(errs, skipped, L) if errs else LengthStats(L, 0, skipped, None, None, None, None)
    return EvalReport(stats, segs, sum(r.n_matched for r in reports),
                      sum(r.n_unmatched for r in reports))


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #

def format_cell(distance, heading) -> str:
    return f"{distance:.3f} / {heading:.4f}"


def _fmt_length(L):
    return f"{L:g} m"


@dataclass
class ReportRow:
    mode: str
    baseline: Optional[float]
    report: Optional[EvalReport]          # None renders as a failed cell
    run: str = ""


def render_table(rows: Sequence[ReportRow], lengths: Optional[Sequence[float]] = None) -> str:
    """Aligned text table, one row per (mode, baseline); cells are "distance % / heading deg/m"."""
    if not rows:
        raise ValueError("nothing to render")
    if lengths is None:
        lengths = sorted({L for r in rows if r.report for L in r.report.stats})
    header = ["mode", "baseline"]
    for L in lengths:
        header += [f"{_fmt_length(L)} median", f"{_fmt_length(L)} RMSE"]
    body = []
    for r in rows:
        line = [r.mode, "-" if r.baseline is None else f"{r.baseline:.2f} m"]
        for L in lengths:
            if r.report is None:
                line += ["failed", "failed"]
                continue
            st = r.report.stats.get(float(L))
            if st is None or st.count == 0:
                cell = f"n/a ({0 if st is None else st.skipped} skipped)"
                line += [cell, cell]
            else:
                line += [format_cell(st.median_distance, st.median_heading),
                         format_cell(st.rmse_distance, st.rmse_heading)]
        body.append(line)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def fmt(row):
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()

    sep = "  ".join("-" * w for w in widths)
    lines = ["(distance in % / heading in deg/m)", fmt(header), sep] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


CSV_HEADER = "run,mode,baseline,L,start_arclength,dist_pct,head_degpm"


def render_csv(rows: Sequence[ReportRow]) -> str:
    out = [CSV_HEADER]
    for r in rows:
        if r.report is None:
            continue
        b = "" if r.baseline is None else f"{r.baseline:.2f}"
        for L in sorted(r.report.segments):
            for e in r.report.segments[L]:
                out.append(f"{r.run},{r.mode},{b},{L:g},{e.start_arclength:.6f},"
                           f"{e.distance_pct:.6f},{e.heading_degpm:.8f}")
    return "\n".join(out) + "\n"


def render_report(rows: Sequence[ReportRow], lengths=None):
    """Text table and per-segment CSV."""
    return render_table(rows, lengths), render_csv(rows)
