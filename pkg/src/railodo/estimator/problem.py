"""Window problem container, Levenberg-Marquardt solver and Schur-complement marginalization.

Variables split in two groups. The dense block holds every keyframe state
plus the landmarks that a marginalization prior refers to; the remaining
landmarks are eliminated per landmark by the Schur complement before each
linear solve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from ..errors import NonAdjacentStates, RankDeficient, SolverDiverged
from ..geometry import CameraIntrinsics, Pose
from .residuals import (POSE_DIM, STATE_DIM, DepthModel, ImuFactorStack, depth_residuals, huber,
                        inertial_residuals, reprojection_residuals)


@dataclass
class FrameObservations:
    """One keyframe's measurements, one row per camera pixel."""

    landmark: np.ndarray
    cam: np.ndarray
    px: np.ndarray
    depth: np.ndarray                  # NaN except on cam0 rows of stereo matches

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0))

    def __len__(self):
        return len(self.landmark)

    def select(self, mask):
        return FrameObservations(self.landmark[mask], self.cam[mask], self.px[mask], self.depth[mask])


@dataclass(frozen=True)
class CameraModel:
    K: CameraIntrinsics
    T_body_cam0: Pose
    T_body_cam1: Pose
    depth: DepthModel
    pixel_sigma: float = 1.0
    huber_px: float = 2.0
    depth_huber: float = 2.0


class LinearPrior:
    """Dense Gaussian prior ``|r0 + J [x (-) x_lin]|^2`` on keyframe states and landmarks.

    Column order: the states in ``frame_ids`` order (``dim`` each), then the
    landmarks in ``landmark_ids`` order (3 each).
    """

    def __init__(self, frame_ids, J, r0, lin_states, dim=STATE_DIM, landmark_ids=(),
                 lin_landmarks=None):
        self.frame_ids = [int(f) for f in frame_ids]
        self.landmark_ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
        self.J = np.asarray(J, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.lin = [s.copy() for s in lin_states]
        self.lin_landmarks = (np.zeros((0, 3)) if lin_landmarks is None
                              else np.asarray(lin_landmarks, dtype=float).reshape(-1, 3).copy())
        self.dim = dim
        self.H = self.J.T @ self.J
        if self.J.shape[1] != len(self.frame_ids) * dim + 3 * len(self.landmark_ids):
            raise ValueError("prior Jacobian width does not match its variables")

    @property
    def n_state_cols(self):
        return len(self.frame_ids) * self.dim

    @property
    def fixes_gauge(self):
        """True when the prior carries information on any pose or landmark column."""
        cols = [np.arange(k * self.dim, k * self.dim + POSE_DIM) for k in range(len(self.frame_ids))]
        cols.append(self.n_state_cols + np.arange(3 * len(self.landmark_ids)))
        cols = np.concatenate(cols)
        return bool(self.J.shape[0] > 0 and np.linalg.norm(self.J[:, cols]) > 0)

    def delta(self, states, landmarks=None):
        parts = [s.boxminus(l)[: self.dim] for s, l in zip(states, self.lin)]
        if len(self.landmark_ids):
            parts.append((np.asarray(landmarks) - self.lin_landmarks).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def residual(self, states, landmarks=None):
        return self.r0 + self.J @ self.delta(states, landmarks)


@dataclass
class WindowProblem:
    states: list
    observations: list
    imu: list                                  # imu[k] links states[k] and states[k+1]
    landmarks: dict
    camera: CameraModel
    inertial: bool = True
    use_stereo: bool = True
    prior: Optional[LinearPrior] = None
    fixed_pose: Optional[int] = 0
    gravity: float = 9.81
    all_landmarks: bool = False                # use single-view landmarks too (marginalization)

    @property
    def dim(self):
        return STATE_DIM if self.inertial else POSE_DIM

    @property
    def size(self):
        return len(self.states)

    def index_of(self, frame_id):
        for i, s in enumerate(self.states):
            if s.frame_id == frame_id:
                return i
        raise KeyError(frame_id)

    def prior_landmarks(self):
        if self.prior is None:
            return np.zeros(0, dtype=np.int64)
        return self.prior.landmark_ids

    def check_gauge(self):
        if self.fixed_pose is not None:
            return
        if self.prior is not None and self.prior.fixes_gauge:
            return
        raise RankDeficient("no gauge: neither a fixed pose nor a prior constrains the window")


# --------------------------------------------------------------------------- #
# Structure
# --------------------------------------------------------------------------- #

@dataclass
class _Structure:
    lm_ids: np.ndarray        # eliminated landmarks
    plm_ids: np.ndarray       # landmarks in the dense block (held by the prior)
    r_state: np.ndarray
    r_cam: np.ndarray
    r_slot: np.ndarray        # < L: eliminated landmark index; >= L: L + dense index
    r_px: np.ndarray
    d_state: np.ndarray
    d_slot: np.ndarray
    d_val: np.ndarray
    n_gated: int

    @property
    def L(self):
        return len(self.lm_ids)

    @property
    def P(self):
        return len(self.plm_ids)


def participating_landmarks(problem: WindowProblem):
    """Landmarks whose window observations constrain them (two views, or a stereo match)."""
    held = set(int(x) for x in problem.prior_landmarks())
    frames_seen = {}
    stereo = set()
    for k, ob in enumerate(problem.observations):
        for lm, cam, d in zip(ob.landmark.tolist(), ob.cam.tolist(), ob.depth.tolist()):
            if lm in held or lm not in problem.landmarks:
                continue
            if cam == 0:
                frames_seen.setdefault(lm, set()).add(k)
            if problem.use_stereo and (cam == 1 or d == d):
                stereo.add(lm)
    if problem.all_landmarks:
        ids = list(frames_seen) + [s for s in stereo if s not in frames_seen]
    else:
        ids = [lm for lm, fr in frames_seen.items() if len(fr) >= 2 or lm in stereo]
    return np.array(sorted(ids), dtype=np.int64)


def build_structure(problem: WindowProblem) -> _Structure:
    lm_ids = participating_landmarks(problem)
    plm_ids = np.asarray(problem.prior_landmarks(), dtype=np.int64)
    all_ids = np.concatenate([lm_ids, plm_ids])
    order = np.argsort(all_ids, kind="stable")
    sorted_ids = all_ids[order]
    r_state, r_cam, r_slot, r_px = [], [], [], []
    d_state, d_slot, d_val = [], [], []
    n_gated = 0
    use_depth = problem.use_stereo and problem.camera.depth.weight > 0
    for k, ob in enumerate(problem.observations):
        if len(ob) == 0 or len(all_ids) == 0:
            continue
        pos = np.clip(np.searchsorted(sorted_ids, ob.landmark), 0, len(sorted_ids) - 1)
        ok = sorted_ids[pos] == ob.landmark
        if not problem.use_stereo:
            ok &= ob.cam == 0
        slot = order[pos]
        idx = np.nonzero(ok)[0]
        r_state.append(np.full(len(idx), k))
        r_cam.append(ob.cam[idx])
        r_slot.append(slot[idx])
        r_px.append(ob.px[idx])
        if use_depth:
            has_d = ok & np.isfinite(ob.depth) & (ob.cam == 0)
            gated = has_d & problem.camera.depth.gated(np.where(np.isfinite(ob.depth), ob.depth, 0.0))
            n_gated += int(np.sum(gated))
            use = np.nonzero(has_d & ~gated)[0]
            d_state.append(np.full(len(use), k))
            d_slot.append(slot[use])
            d_val.append(ob.depth[use])

    def cat(xs, dtype, shape=(0,)):
        return np.concatenate(xs).astype(dtype) if xs else np.zeros(shape, dtype)

    return _Structure(
        lm_ids, plm_ids,
        cat(r_state, np.int64), cat(r_cam, np.int64), cat(r_slot, np.int64),
        cat(r_px, float, (0, 2)).reshape(-1, 2),
        cat(d_state, np.int64), cat(d_slot, np.int64), cat(d_val, float), n_gated)


def _landmark_array(problem, ids):
    if len(ids) == 0:
        return np.zeros((0, 3))
    return np.array([problem.landmarks[int(i)] for i in ids], dtype=float)


# --------------------------------------------------------------------------- #
# Evaluation and linearization
# --------------------------------------------------------------------------- #

@dataclass
class _Linearization:
    cost: float
    sq_sum: float
    n_res: int
    H: np.ndarray = None         # dense block (Dd, Dd)
    g: np.ndarray = None         # (Dd,)
    Hll: np.ndarray = None       # (L, 3, 3)
    gl: np.ndarray = None        # (L, 3)
    Bpl: np.ndarray = None       # (L, S, 6, 3)


def _scatter_sum(index, values, n):
    """``out[index[k]] += values[k]`` for stacked blocks, via bincount."""
    block = values.shape[1:]
    m = int(np.prod(block))
    flat = (index[:, None] * m + np.arange(m)[None]).ravel()
    return np.bincount(flat, values.reshape(-1), minlength=n * m).reshape((n,) + block)


def _evaluate(problem: WindowProblem, st: _Structure, states, lms, plms, linearize=True):
    """Robust cost and (optionally) the normal equations.

    ``lms`` are the eliminated landmarks, ``plms`` the prior-held ones.
    """
    cam = problem.camera
    S = len(states)
    d = problem.dim
    L, P = len(lms), len(plms)
    Ds = S * d
    Dd = Ds + 3 * P
    all_lms = np.vstack([lms, plms]) if P else lms
    cost = 0.0
    sq_sum = 0.0
    n_res = 0
    if linearize:
        H = np.zeros((Dd, Dd))
        g = np.zeros(Dd)
    Rs = np.array([s.R for s in states]) if S else np.zeros((0, 3, 3))
    ps = np.array([s.p for s in states]) if S else np.zeros((0, 3))

    groups = []
    if len(st.r_state):
        for c, T in ((0, cam.T_body_cam0), (1, cam.T_body_cam1)):
            m = st.r_cam == c
            if not np.any(m):
                continue
            si, sl = st.r_state[m], st.r_slot[m]
            r, Jp, Jl, valid = reprojection_residuals(
                Rs[si], ps[si], T.R, T.translation, cam.K, all_lms[sl], st.r_px[m],
                cam.pixel_sigma, jacobians=linearize)
            sq = np.sum(r * r, axis=1)
            rc, w = huber(sq, cam.huber_px / cam.pixel_sigma)
            w = np.where(valid, w, 0.0)
            rc = np.where(valid, rc, 0.0)
            cost += float(np.sum(rc))
            sq_sum += float(np.sum(sq))
            n_res += 2 * int(np.sum(valid))
            groups.append((si, sl, r, Jp, Jl, w))
    if len(st.d_state):
        si, sl = st.d_state, st.d_slot
        r, e, Jp, Jl = depth_residuals(Rs[si], ps[si], cam.T_body_cam0.R, cam.T_body_cam0.translation,
                                       all_lms[sl], st.d_val, cam.depth, jacobians=linearize)
        rc, w = huber(e * e, cam.depth_huber)
        cost += float(cam.depth.weight * np.sum(rc))
        sq_sum += float(np.sum(r * r))
        n_res += len(r)
        groups.append((si, sl, r[:, None], Jp, Jl, w))

    if linearize:
        M = L + P
        App = np.zeros((S, 6, 6))
        gp = np.zeros((S, 6))
        Hmm = np.zeros((M, 3, 3))
        gm = np.zeros((M, 3))
        Bm = np.zeros((M * S, 6, 3))
        if groups:
            # depth rows are padded to two rows so all groups stack into one batch
            def pad(a):
                return a if a.shape[1] == 2 else np.concatenate([a, np.zeros_like(a)], axis=1)
            si = np.concatenate([gr[0] for gr in groups])
            sl = np.concatenate([gr[1] for gr in groups])
            r = np.concatenate([pad(gr[2]) for gr in groups])
            Jp = np.concatenate([pad(gr[3]) for gr in groups])
            Jl = np.concatenate([pad(gr[4]) for gr in groups])
            w = np.concatenate([gr[5] for gr in groups])
            wJpT = np.transpose(Jp * w[:, None, None], (0, 2, 1))
            wJlT = np.transpose(Jl * w[:, None, None], (0, 2, 1))
            Jlr = np.concatenate([Jl, r[:, :, None]], axis=2)          # (n, 2, 4)
            pp = (wJpT @ np.concatenate([Jp, r[:, :, None]], axis=2)).reshape(len(si), 42)
            mm = (wJlT @ Jlr).reshape(len(si), 12)
            acc = _scatter_sum(si, pp, S).reshape(S, 6, 7)
            App += acc[:, :, :6]
            gp += acc[:, :, 6]
            acc = _scatter_sum(sl, mm, M).reshape(M, 3, 4)
            Hmm += acc[:, :, :3]
            gm += acc[:, :, 3]
            Bm += _scatter_sum(sl * S + si, wJpT @ Jl, M * S)
        Bm = Bm.reshape(M, S, 6, 3)
        pose_cols = (np.arange(S)[:, None] * d + np.arange(6)[None]).ravel()
        for k in range(S):
            H[k * d:k * d + 6, k * d:k * d + 6] += App[k]
        g[pose_cols] += gp.reshape(-1)
        Hll, gl, Bpl = Hmm[:L], gm[:L], Bm[:L]
        if P:
            j = Ds + 3 * np.arange(P)[:, None, None]
            rows = j + np.arange(3)[None, :, None]
            cols = j + np.arange(3)[None, None, :]
            H[rows, cols] += Hmm[L:]
            g[Ds:] += gm[L:].reshape(-1)
            C = np.transpose(Bm[L:], (1, 2, 0, 3)).reshape(6 * S, 3 * P)
            H[:Ds].reshape(S, d, Dd)[:, :6, Ds:] += C.reshape(S, 6, 3 * P)
            H[Ds:, :Ds].reshape(3 * P, S, d)[:, :, :6] += C.T.reshape(3 * P, S, 6)

    if problem.inertial and problem.imu:
        for k, pre in enumerate(problem.imu):
            dt = states[k + 1].timestamp - states[k].timestamp
            if abs(dt - pre.dt) > 1e-6:
                raise NonAdjacentStates(f"IMU factor {k} spans {pre.dt:.6f} s, states {dt:.6f} s")
        stk = _imu_stack(problem.imu)
        Si, Sj = states[:-1], states[1:]
        r, Ji, Jj = inertial_residuals(
            Rs[:-1], ps[:-1], np.array([s.v for s in Si]), np.array([s.bg for s in Si]),
            np.array([s.ba for s in Si]), Rs[1:], ps[1:], np.array([s.v for s in Sj]),
            np.array([s.bg for s in Sj]), np.array([s.ba for s in Sj]), stk, problem.gravity,
            jacobians=linearize)
        c = float(np.sum(r * r))
        cost += c
        sq_sum += c
        n_res += r.size
        if linearize:
            # factor k touches the contiguous columns of states k and k+1
            J = np.concatenate([Ji, Jj], axis=2)
            JT = np.transpose(J, (0, 2, 1))
            blocks = JT @ J
            grads = (JT @ r[:, :, None])[:, :, 0]
            for k in range(len(r)):
                a = k * d
                H[a:a + 2 * d, a:a + 2 * d] += blocks[k]
                g[a:a + 2 * d] += grads[k]

    if problem.prior is not None:
        pr = problem.prior
        idx = [_state_index(states, fid) for fid in pr.frame_ids]
        r = pr.residual([states[i] for i in idx], plms)
        c = float(r @ r)
        cost += c
        sq_sum += c
        n_res += len(r)
        if linearize and len(r):
            # the prior's columns are contiguous runs: one per state, one for its landmarks
            runs = [(i * d, d) for i in idx] + [(Ds, 3 * P)]
            offs = np.cumsum([0] + [n for _, n in runs])
            gpr = r @ pr.J
            for (a, na), oa in zip(runs, offs):
                g[a:a + na] += gpr[oa:oa + na]
                for (b, nb), ob in zip(runs, offs):
                    H[a:a + na, b:b + nb] += pr.H[oa:oa + na, ob:ob + nb]

    lin = _Linearization(cost, sq_sum, n_res)
    if linearize:
        lin.H, lin.g, lin.Hll, lin.gl, lin.Bpl = H, g, Hll, gl, Bpl
    return lin


def _state_index(states, frame_id):
    for i, s in enumerate(states):
        if s.frame_id == frame_id:
            return i
    raise KeyError(f"prior references frame {frame_id} which is not in the window")


_STACKS = {}


def _imu_stack(pres):
    """Stacked factor data, cached on the identity of the factor list contents."""
    key = tuple(id(p) for p in pres)
    hit = _STACKS.get(key)
    if hit is None or any(a is not b for a, b in zip(hit[0], pres)):
        if len(_STACKS) > 256:
            _STACKS.clear()
        hit = (list(pres), ImuFactorStack.from_factors(pres))
        _STACKS[key] = hit
    return hit[1]


def free_indices(problem: WindowProblem, n_dense_landmarks=0):
    d = problem.dim
    mask = np.ones(len(problem.states) * d + 3 * n_dense_landmarks, dtype=bool)
    if problem.fixed_pose is not None:
        o = problem.fixed_pose * d
        mask[o:o + POSE_DIM] = False
    return np.nonzero(mask)[0]


# --------------------------------------------------------------------------- #
# Levenberg-Marquardt
# --------------------------------------------------------------------------- #

def _damped_diag(diag, lam):
    return lam * np.clip(diag, 1e-6, 1e32)


def _solve_step(problem, lin: _Linearization, free, lam):
    """Damped Gauss-Newton step with eliminated landmarks handled by the Schur complement."""
    S = len(problem.states)
    d = problem.dim
    L = lin.Hll.shape[0]
    H = lin.H.copy()
    H[np.diag_indices_from(H)] += _damped_diag(np.diag(lin.H), lam)
    rhs = -lin.g.copy()
    pose_cols = (np.arange(S)[:, None] * d + np.arange(6)[None]).ravel()
    if L:
        Hll = lin.Hll.copy()
        diag_l = np.einsum("lii->li", lin.Hll)
        Hll[:, [0, 1, 2], [0, 1, 2]] += _damped_diag(diag_l, lam)
        Hll_inv = np.linalg.inv(Hll)
        Bf = lin.Bpl.reshape(L, S * 6, 3)
        T = Bf @ Hll_inv                                       # (L, 6S, 3)
        Tm = np.transpose(T, (1, 0, 2)).reshape(S * 6, 3 * L)
        Bm = np.transpose(Bf, (1, 0, 2)).reshape(S * 6, 3 * L)
        Ds = S * d
        H[:Ds, :Ds].reshape(S, d, S, d)[:, :6, :, :6] -= (Tm @ Bm.T).reshape(S, 6, S, 6)
        rhs[pose_cols] += Tm @ lin.gl.reshape(-1)
    Hf = H if len(free) == H.shape[0] else H[np.ix_(free, free)]
    try:
        c = scipy.linalg.cho_factor(Hf, check_finite=False)
        dx_free = scipy.linalg.cho_solve(c, rhs[free], check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        dx_free = np.linalg.lstsq(Hf, rhs[free], rcond=None)[0]
    dx = np.zeros(H.shape[0])
    dx[free] = dx_free
    if L:
        dps = dx[pose_cols]
        rhs_l = -lin.gl - (Bm.T @ dps).reshape(L, 3)
        dl = (Hll_inv @ rhs_l[:, :, None])[:, :, 0]
    else:
        dl = np.zeros((0, 3))
    return dx, dl


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    reason: str
    rms: float
    n_reprojection: int
    n_depth: int
    n_depth_gated: int
    n_landmarks: int
    costs: list = field(default_factory=list)


def _apply(states, lms, plms, dx, dl, d):
    new_states = [s.copy() for s in states]
    for k, s in enumerate(new_states):
        s.retract(dx[k * d:(k + 1) * d])
    Ds = len(states) * d
    return new_states, lms + dl, plms + dx[Ds:].reshape(-1, 3)


def solve_window(problem: WindowProblem, max_iterations=15, rel_tol=1e-6, step_tol=1e-8,
                 initial_lambda=1e-9, max_lambda=1e12, check_rank=False) -> SolveReport:
    """Levenberg-Marquardt on the robustified window cost; updates the problem in place."""
    problem.check_gauge()
    st = build_structure(problem)
    states = problem.states
    lms = _landmark_array(problem, st.lm_ids)
    plms = _landmark_array(problem, st.plm_ids)
    free = free_indices(problem, st.P)
    d = problem.dim
    lin = _evaluate(problem, st, states, lms, plms, linearize=True)
    if check_rank:
        _check_rank(problem)
    initial = lin.cost
    costs = [lin.cost]
    lam = initial_lambda
    iterations = 0
    converged = False
    reason = "max_iterations"
    if not math.isfinite(lin.cost):
        raise SolverDiverged("non-finite initial cost")

    while iterations < max_iterations:
        if lin.cost <= 1e-30:
            converged, reason = True, "zero_cost"
            break
        iterations += 1
        accepted = False
        while True:
            dx, dl = _solve_step(problem, lin, free, lam)
            step = math.sqrt(float(dx @ dx) + float(np.sum(dl * dl)))
            if not math.isfinite(step):
                lam *= 10.0
                if lam > max_lambda:
                    raise SolverDiverged("non-finite step at maximum damping")
                continue
            if step < step_tol:
                converged, reason = True, "small_step"
                break
            cand = _apply(states, lms, plms, dx, dl, d)
            trial = _evaluate(problem, st, *cand, linearize=True)
            if math.isfinite(trial.cost) and trial.cost <= lin.cost:
                accepted = True
                break
            lam *= 10.0
            if lam > max_lambda:
                rel_increase = (trial.cost - lin.cost) / max(lin.cost, 1e-300)
                if math.isfinite(trial.cost) and rel_increase < 1e-9:
                    converged, reason = True, "no_decrease"
                    break
                raise SolverDiverged(
                    f"cost increased at maximum damping ({lin.cost:.6g} -> {trial.cost:.6g})")
        if not accepted:
            break
        rel = (lin.cost - trial.cost) / max(lin.cost, 1e-300)
        states, lms, plms = cand
        lin = trial
        costs.append(lin.cost)
        lam = max(lam / 3.0, 1e-12)
        if rel < rel_tol:
            converged, reason = True, "small_decrease"
            break
        if step < step_tol:
            converged, reason = True, "small_step"
            break

    for k, s in enumerate(states):
        problem.states[k] = s
    for i, lm in zip(st.lm_ids, lms):
        problem.landmarks[int(i)] = lm
    for i, lm in zip(st.plm_ids, plms):
        problem.landmarks[int(i)] = lm
    rms = math.sqrt(lin.sq_sum / lin.n_res) if lin.n_res else 0.0
    return SolveReport(iterations, initial, lin.cost, converged, reason, rms,
                       len(st.r_state), len(st.d_state), st.n_gated, st.L + st.P, costs)


def window_cost(problem: WindowProblem):
    st = build_structure(problem)
    return _evaluate(problem, st, problem.states, _landmark_array(problem, st.lm_ids),
                     _landmark_array(problem, st.plm_ids), linearize=False).cost


@dataclass
class DenseLayout:
    """Where each variable sits in the matrices returned by ``dense_system``."""

    state_slices: dict            # frame_id -> indices (free dims only)
    landmark_slices: dict         # landmark id -> indices


def dense_system(problem: WindowProblem):
    """Full undamped normal equations ``(H, g)`` over every free variable, plus its layout."""
    st = build_structure(problem)
    lms = _landmark_array(problem, st.lm_ids)
    plms = _landmark_array(problem, st.plm_ids)
    lin = _evaluate(problem, st, problem.states, lms, plms, linearize=True)
    S = len(problem.states)
    d = problem.dim
    L, P = st.L, st.P
    Dd = S * d + 3 * P
    N = Dd + 3 * L
    H = np.zeros((N, N))
    g = np.zeros(N)
    H[:Dd, :Dd] = lin.H
    g[:Dd] = lin.g
    for l in range(L):
        o = Dd + 3 * l
        H[o:o + 3, o:o + 3] = lin.Hll[l]
        g[o:o + 3] = lin.gl[l]
        for s in range(S):
            H[s * d:s * d + 6, o:o + 3] = lin.Bpl[l, s]
            H[o:o + 3, s * d:s * d + 6] = lin.Bpl[l, s].T
    free = np.concatenate([free_indices(problem, P), Dd + np.arange(3 * L)])
    pos = np.full(N, -1)
    pos[free] = np.arange(len(free))
    state_slices = {}
    for k, s in enumerate(problem.states):
        p = pos[k * d:(k + 1) * d]
        state_slices[s.frame_id] = p[p >= 0]
    lm_slices = {}
    for j, i in enumerate(st.plm_ids):
        lm_slices[int(i)] = pos[S * d + 3 * j:S * d + 3 * j + 3]
    for j, i in enumerate(st.lm_ids):
        lm_slices[int(i)] = pos[Dd + 3 * j:Dd + 3 * j + 3]
    return H[np.ix_(free, free)], g[free], DenseLayout(state_slices, lm_slices)


def _check_rank(problem):
    H, _, _ = dense_system(problem)
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        raise RankDeficient("window normal equations are singular")


def _jacobi_scale(H):
    d = np.sqrt(np.clip(np.diag(H), 1e-300, None))
    return d, H / d[:, None] / d[None, :]


def _pinv_sqrt(Hmm, rel_eps):
    """``A`` with ``A^T A = pinv(Hmm)`` for a stack of symmetric blocks (..., n, n)."""
    w, V = np.linalg.eigh(0.5 * (Hmm + np.swapaxes(Hmm, -1, -2)))
    top = np.max(np.abs(w), axis=-1, keepdims=True) if w.shape[-1] else w
    ok = w > rel_eps * np.maximum(top, 1e-300)
    s = np.where(ok, 1.0 / np.sqrt(np.where(ok, w, 1.0)), 0.0)
    return np.swapaxes(V, -1, -2) * s[..., :, None]


def schur_marginalize(H, g, marg, keep, rel_eps=1e-12, blocks=()):
    """Eliminate ``marg`` from ``H x = -g``; returns the reduced ``(H_keep, g_keep)``.

    The elimination runs on a Jacobi-scaled system: bias random-walk terms are
    many orders of magnitude stiffer than the weakly observed directions.
    ``blocks`` optionally lists equal-sized index groups inside ``marg`` that are
    coupled to each other only through the remaining variables (landmarks seen
    by poses alone); they are eliminated first as a batch of small blocks.
    """
    marg = np.asarray(marg, dtype=np.int64)
    keep = np.asarray(keep, dtype=np.int64)
    d, Hs = _jacobi_scale(H)
    gs = g / d
    if len(blocks):
        B = np.asarray(blocks, dtype=np.int64)
        rest = np.setdiff1d(marg, B.ravel())
        other = np.concatenate([rest, keep])
        A = _pinv_sqrt(Hs[B[:, :, None], B[:, None, :]], rel_eps)
        Ab = A @ Hs[B][:, :, other]                       # (nb, k, n_other)
        bb = (A @ gs[B][:, :, None])[:, :, 0]
        Ab = Ab.reshape(-1, len(other))
        Hs = Hs[np.ix_(other, other)] - Ab.T @ Ab
        gs = gs[other] - Ab.T @ bb.reshape(-1)
        d = d[other]
        marg = np.arange(len(rest))
        keep = len(rest) + np.arange(len(keep))
    Hmk = Hs[np.ix_(marg, keep)]
    A = _pinv_sqrt(Hs[np.ix_(marg, marg)], rel_eps)
    Ak = A @ Hmk
    b = A @ gs[marg]
    H_red = Hs[np.ix_(keep, keep)] - Ak.T @ Ak
    g_red = gs[keep] - Ak.T @ b
    dk = d[keep]
    H_red = H_red * dk[:, None] * dk[None, :]
    return 0.5 * (H_red + H_red.T), g_red * dk


def prior_from_information(H, g, rel_eps=1e-12):
    """Square-root factor ``(J, r)`` with ``J^T J = H`` and ``J^T r = g``.

    Rank-revealing pivoted Cholesky on the Jacobi-scaled matrix; the eigen
    decomposition is the fallback when the factorization reports trouble.
    """
    d, Hs = _jacobi_scale(H)
    Hs = 0.5 * (Hs + Hs.T)
    gs = g / d
    n = len(gs)
    if n:
        U, piv, rank, info = scipy.linalg.lapack.dpstrf(Hs, lower=0, tol=rel_eps)
        if info >= 0 and rank > 0:
            U = np.triu(U[:rank])
            perm = piv - 1
            Jp = np.empty_like(U)
            Jp[:, perm] = U
            r = scipy.linalg.solve_triangular(U[:, :rank], gs[perm[:rank]], trans="T",
                                              check_finite=False)
            J = Jp * d[None, :]
            if np.all(np.isfinite(J)) and np.all(np.isfinite(r)):
                return J, r
    w, V = np.linalg.eigh(Hs)
    keep = w > rel_eps * max(float(np.max(w)) if len(w) else 0.0, 1e-300)
    w, V = w[keep], V[:, keep]
    sw = np.sqrt(w)
    J = (sw[:, None] * V.T) * d[None, :]
    r = (V.T @ gs) / sw
    return J, r
