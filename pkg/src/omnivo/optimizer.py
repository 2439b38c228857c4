"""Windowed photometric bundle adjustment.

Levenberg-damped Gauss-Newton over all keyframe poses, affine brightness
pairs, shared intrinsics, and point inverse distances; points are eliminated
by the Schur complement (they are scalar blocks), old frames and points are
absorbed into a Gaussian prior by the same elimination.

Variable layout per system build: ``[8 dims per window keyframe
(6 pose twist + a + b) ..., 5 intrinsic dims]`` followed by one inverse
distance per active point. Pose increments are left-multiplicative twists
``[omega, v]`` on world-to-camera poses.

Frames and intrinsics connected to the marginalization prior keep their
first linearization point; photometric Jacobians for them are evaluated
there (first-estimate Jacobians) while residual values always use the
current state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraModel, UnifiedOmniParams
from .geometry import SE3, se3_exp, se3_log
from .image import Image, Pyramid
from .residuals import (
    AffineBrightness,
    PhotoResidual,
    ResidualConfig,
    ResidualState,
    evaluate_batch,
    jacobian_batch,
)

FRAME_DIM = 8  # 6 pose + 2 affine
INTR_DIM = 5


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 6
    rel_decrease_tol: float = 1e-4
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 10.0  # retries must be able to reach O(1) damping
    lm_lambda_down: float = 3.0
    lm_lambda_floor: float = 1e-6
    lm_max_retries: int = 6
    d_clamp: tuple = (1e-4, 1e3)
    pose_gauge_weight: float = 1e8
    affine_prior_a: float = 1e4  # exposures known: pull (a, b) firmly to zero
    affine_prior_b: float = 1e2
    intr_prior_weight: tuple = (1e4, 1e4, 1e4, 1e4, 4e4)
    use_fej: bool = True


@dataclass
class KeyframeState:
    kf_id: int
    timestamp: float
    pyramid: Pyramid
    pose: SE3  # world -> camera
    affine: AffineBrightness = field(default_factory=AffineBrightness)
    lin_pose: SE3 | None = None  # set once the frame joins the prior
    lin_affine: AffineBrightness | None = None

    @property
    def image(self) -> Image:
        return self.pyramid.levels[0]


@dataclass
class ActivePoint:
    uid: int
    host_id: int
    pixel: np.ndarray
    d: float
    host_vals: np.ndarray  # cached pattern intensities in the host frame
    w_grad: np.ndarray  # cached gradient weights
    sigma_d: float = 0.5


def make_active_point(
    state: "WindowState", host_id: int, pixel, d: float, sigma_d: float = 0.5
) -> ActivePoint:
    """Create a point with cached host-pattern intensities and weights."""
    from .image import interp
    from .residuals import PATTERN_OFFSETS, gradient_weight

    kf = state.kf(host_id)
    uv = np.asarray(pixel, float)[None, :] + PATTERN_OFFSETS
    vals, gx, gy, ok = interp(kf.image, uv)
    if not np.all(ok):
        raise ValueError(f"pattern of {pixel} leaves the host image")
    return ActivePoint(
        uid=state.new_uid(),
        host_id=host_id,
        pixel=np.asarray(pixel, float),
        d=float(d),
        host_vals=vals,
        w_grad=gradient_weight(gx, gy, state.rcfg.grad_weight_c),
        sigma_d=sigma_d,
    )


@dataclass
class MarginalizationPrior:
    """Quadratic prior ``E = 0.5 dx^T H dx + b^T dx`` around `lin` values.

    Keys are ``("kf", id)`` (8 dims) or ``("intr",)`` (5 dims). The expansion
    point is shifted exactly (quadratic) at every marginalization; the
    first-estimate Jacobian values live on the keyframes themselves.
    """

    keys: list
    H: np.ndarray
    b: np.ndarray
    lin: dict

    def dim(self) -> int:
        return self.H.shape[0]


class WindowState:
    """Joint optimization state over the active keyframe window."""

    def __init__(self, cam: CameraModel, rcfg: ResidualConfig = ResidualConfig()):
        self.cam = cam
        self.rcfg = rcfg
        self.keyframes: list[KeyframeState] = []
        self.points: list[ActivePoint] = []
        self.prior: MarginalizationPrior | None = None
        self.intr_prior_center = cam.params.as_array()
        self.lin_intr: np.ndarray | None = None
        self._next_uid = 0
        self._pmap: dict = {}

    # ------------------------------------------------------------- lookups
    def kf(self, kf_id: int) -> KeyframeState:
        for k in self.keyframes:
            if k.kf_id == kf_id:
                return k
        raise KeyError(f"keyframe {kf_id} not in window")

    def kf_pos(self, kf_id: int) -> int:
        for i, k in enumerate(self.keyframes):
            if k.kf_id == kf_id:
                return i
        raise KeyError(f"keyframe {kf_id} not in window")

    def point(self, uid: int) -> ActivePoint:
        p = self._pmap.get(uid)
        if p is None or (self._pmap and len(self._pmap) != len(self.points)):
            self._pmap = {q.uid: q for q in self.points}
            p = self._pmap.get(uid)
        if p is None:
            raise KeyError(f"point {uid} not in window")
        return p

    def new_uid(self) -> int:
        self._next_uid += 1
        return self._next_uid - 1

    def frame_dim(self) -> int:
        return FRAME_DIM * len(self.keyframes) + INTR_DIM

    def gauge_kf_id(self):
        return self.keyframes[0].kf_id if self.keyframes else None

    # -------------------------------------------------- state (de)serialize
    def snapshot(self):
        return (
            [(k.pose.copy(), AffineBrightness(k.affine.a, k.affine.b)) for k in self.keyframes],
            [p.d for p in self.points],
            self.cam.params.as_array(),
        )

    def restore(self, snap):
        poses, ds, intr = snap
        for k, (pose, aff) in zip(self.keyframes, poses):
            k.pose = pose
            k.affine = aff
        for p, d in zip(self.points, ds):
            p.d = d
        self.cam = self.cam.with_params(UnifiedOmniParams.from_array(intr))


@dataclass
class HessianSystem:
    """Normal equations with points kept as scalar diagonal blocks."""

    H_ff: np.ndarray  # (D, D) frames + intrinsics
    b_f: np.ndarray  # (D,)
    H_fp: np.ndarray  # (D, P)
    H_pp: np.ndarray  # (P,)
    b_p: np.ndarray  # (P,)
    point_uids: list


class SolveFailure(Exception):
    pass


# ---------------------------------------------------------------- residuals


def group_residuals(residuals):
    groups = {}
    for idx, res in enumerate(residuals):
        if res.state is ResidualState.ACTIVE:
            groups.setdefault((res.host, res.target), []).append(idx)
    return groups


def evaluate_all(state: WindowState, residuals, update_states: bool = True):
    """Evaluate every active residual; returns (total data energy, evals).

    `evals` maps (host, target) -> (indices, ResidualBatch). Residuals whose
    pattern leaves the image/FoV are flagged OOB, those above the outlier
    energy threshold OUTLIER; both contribute zero energy and are skipped by
    the system build until re-activated by a later evaluation.
    """
    rcfg = state.rcfg
    evals = {}
    total = 0.0
    for (h, t), idxs in group_residuals(residuals).items():
        kf_h, kf_t = state.kf(h), state.kf(t)
        pts = [state.point(residuals[i].point) for i in idxs]
        pixels = np.array([p.pixel for p in pts])
        ds = np.array([p.d for p in pts])
        host_vals = np.array([p.host_vals for p in pts])
        w_grad = np.array([p.w_grad for p in pts])
        ev = evaluate_batch(
            kf_h.image,
            kf_t.image,
            kf_h.pose,
            kf_t.pose,
            kf_h.affine,
            kf_t.affine,
            pixels,
            ds,
            state.cam,
            rcfg,
            host_vals=host_vals,
            w_grad=w_grad,
        )
        if update_states:
            _apply_states(residuals, idxs, ev, rcfg)
        # LM objective: cap each term at the outlier threshold and charge the
        # cap for OOB terms, so a step cannot gain by pushing residuals out
        capped = np.minimum(ev.energy, rcfg.outlier_energy)
        total += float(np.sum(np.where(ev.valid, capped, rcfg.outlier_energy)))
        evals[(h, t)] = (idxs, ev)
    return total, evals


def _apply_states(residuals, idxs, ev, rcfg: ResidualConfig):
    for j, i in enumerate(idxs):
        res = residuals[i]
        res.r = ev.r[j]
        res.w = ev.w_irls[j]
        res.energy = float(ev.energy[j])
        if not ev.valid[j]:
            res.state = ResidualState.OOB
        elif ev.energy[j] > rcfg.outlier_energy:
            res.state = ResidualState.OUTLIER


def apply_residual_states(residuals, evals, rcfg: ResidualConfig):
    """Commit OOB/outlier flags from an accepted evaluation."""
    for (h, t), (idxs, ev) in evals.items():
        _apply_states(residuals, idxs, ev, rcfg)


def prior_energy(state: WindowState, ocfg: OptimizerConfig) -> float:
    e = 0.0
    for k in state.keyframes:
        e += ocfg.affine_prior_a * k.affine.a**2 + ocfg.affine_prior_b * k.affine.b**2
    dc = state.cam.params.as_array() - state.intr_prior_center
    e += float(np.array(ocfg.intr_prior_weight) @ (dc * dc))
    if state.prior is not None:
        dx = prior_deviation(state, state.prior)
        e += float(0.5 * dx @ state.prior.H @ dx + state.prior.b @ dx)
    return e


def total_energy(state: WindowState, residuals, ocfg: OptimizerConfig) -> float:
    data, _ = evaluate_all(state, residuals, update_states=False)
    return data + prior_energy(state, ocfg)


def prior_deviation(state: WindowState, prior: MarginalizationPrior) -> np.ndarray:
    """Stacked deviation of the current state from the prior's expansion point."""
    parts = []
    for key in prior.keys:
        if key[0] == "kf":
            kf = state.kf(key[1])
            lin_pose, lin_aff = prior.lin[key]
            parts.append(se3_log(kf.pose @ lin_pose.inverse()))
            parts.append([kf.affine.a - lin_aff.a, kf.affine.b - lin_aff.b])
        else:
            parts.append(state.cam.params.as_array() - prior.lin[key])
    return np.concatenate([np.atleast_1d(np.asarray(p, float)) for p in parts])


def _prior_index_map(state: WindowState, prior: MarginalizationPrior) -> np.ndarray:
    """Column indices of the prior's variables inside the current layout."""
    cols = []
    for key in prior.keys:
        if key[0] == "kf":
            base = FRAME_DIM * state.kf_pos(key[1])
            cols.extend(range(base, base + FRAME_DIM))
        else:
            base = FRAME_DIM * len(state.keyframes)
            cols.extend(range(base, base + INTR_DIM))
    return np.array(cols, int)


# ------------------------------------------------------------ system build


def _jac_args(state: WindowState, kf: KeyframeState, ocfg: OptimizerConfig):
    """Pose/affine used for Jacobians: linearization values once prior-connected."""
    if ocfg.use_fej and kf.lin_pose is not None:
        return kf.lin_pose, kf.lin_affine or kf.affine
    return kf.pose, kf.affine


def _jac_cam(state: WindowState, ocfg: OptimizerConfig) -> CameraModel:
    if ocfg.use_fej and state.lin_intr is not None:
        return state.cam.with_params(UnifiedOmniParams.from_array(state.lin_intr))
    return state.cam


def build_system(
    state: WindowState,
    residuals,
    ocfg: OptimizerConfig = OptimizerConfig(),
    evals=None,
    include_gauge: bool = True,
) -> HessianSystem:
    """Accumulate J^T W J and J^T W r over active residuals plus all priors."""
    if evals is None:
        _, evals = evaluate_all(state, residuals)
    D = state.frame_dim()
    P = len(state.points)
    uid_col = {p.uid: i for i, p in enumerate(state.points)}
    H_ff = np.zeros((D, D))
    b_f = np.zeros(D)
    H_fp = np.zeros((D, P))
    H_pp = np.zeros(P)
    b_p = np.zeros(P)
    intr_sl = slice(FRAME_DIM * len(state.keyframes), D)

    for (h, t), (idxs, ev) in evals.items():
        live = [
            j
            for j, i in enumerate(idxs)
            if residuals[i].state is ResidualState.ACTIVE and ev.valid[j]
        ]
        if not live:
            continue
        live = np.array(live)
        kf_h, kf_t = state.kf(h), state.kf(t)
        pose_h, aff_h = _jac_args(state, kf_h, ocfg)
        pose_t, aff_t = _jac_args(state, kf_t, ocfg)
        cam_j = _jac_cam(state, ocfg)
        pts = [state.point(residuals[idxs[j]].point) for j in live]
        ds = np.array([p.d for p in pts])

        sub = _slice_batch(ev, live)
        J = jacobian_batch(
            sub, pose_h, pose_t, aff_h, aff_t, ds, cam_j,
            kf_h.image.exposure_t, kf_t.image.exposure_t,
        )
        w = sub.w_irls
        r = sub.r
        Jh = np.concatenate([J.pose_host, J.affine_host], axis=-1)  # (N, K, 8)
        Jt = np.concatenate([J.pose_target, J.affine_target], axis=-1)
        Jc = J.intrinsics
        sl_h = slice(FRAME_DIM * state.kf_pos(h), FRAME_DIM * state.kf_pos(h) + FRAME_DIM)
        sl_t = slice(FRAME_DIM * state.kf_pos(t), FRAME_DIM * state.kf_pos(t) + FRAME_DIM)

        blocks = [(sl_h, Jh), (sl_t, Jt), (intr_sl, Jc)]
        for sa, Ja in blocks:
            for sb, Jb in blocks:
                if sa.start > sb.start:
                    continue  # accumulate upper triangle, mirror later
                H_ff[sa, sb] += np.einsum("nka,nk,nkb->ab", Ja, w, Jb)
            b_f[sa] += np.einsum("nka,nk->a", Ja, w * r)

        cols = np.array([uid_col[p.uid] for p in pts])
        wJd = w * J.d
        for sa, Ja in blocks:
            rows = np.arange(sa.start, sa.stop)
            np.add.at(H_fp, (rows[:, None], cols[None, :]), np.einsum("nka,nk->na", Ja, wJd).T)
        np.add.at(H_pp, cols, np.einsum("nk,nk->n", wJd, J.d))
        np.add.at(b_p, cols, np.einsum("nk,nk->n", wJd, r))

    iu = np.triu_indices(D, k=1)
    H_ff[(iu[1], iu[0])] = H_ff[iu]

    # affine priors (keep the gauge-free brightness pair observable)
    for i, k in enumerate(state.keyframes):
        a_idx = FRAME_DIM * i + 6
        H_ff[a_idx, a_idx] += ocfg.affine_prior_a
        H_ff[a_idx + 1, a_idx + 1] += ocfg.affine_prior_b
        b_f[a_idx] += ocfg.affine_prior_a * k.affine.a
        b_f[a_idx + 1] += ocfg.affine_prior_b * k.affine.b

    # weak intrinsics prior at calibration
    w_intr = np.asarray(ocfg.intr_prior_weight, float)
    dc = state.cam.params.as_array() - state.intr_prior_center
    H_ff[intr_sl, intr_sl] += np.diag(w_intr)
    b_f[intr_sl] += w_intr * dc

    # pose gauge on the oldest keyframe until a prior anchors the window
    if include_gauge and state.prior is None and state.keyframes:
        base = FRAME_DIM * state.kf_pos(state.gauge_kf_id())
        H_ff[base : base + 6, base : base + 6] += ocfg.pose_gauge_weight * np.eye(6)

    if state.prior is not None:
        cols = _prior_index_map(state, state.prior)
        dx = prior_deviation(state, state.prior)
        H_ff[np.ix_(cols, cols)] += state.prior.H
        b_f[cols] += state.prior.b + state.prior.H @ dx

    return HessianSystem(H_ff, b_f, H_fp, H_pp, b_p, [p.uid for p in state.points])


def _slice_batch(ev, rows):
    from .residuals import ResidualBatch

    return ResidualBatch(
        valid=ev.valid[rows],
        r=ev.r[rows],
        w_grad=ev.w_grad[rows],
        w_irls=ev.w_irls[rows],
        energy=ev.energy[rows],
        scale=ev.scale,
        host_vals=ev.host_vals[rows],
        pattern_uv=ev.pattern_uv[rows],
        rays=ev.rays[rows],
        x_target=ev.x_target[rows],
        uv_target=ev.uv_target[rows],
        grad_target=ev.grad_target[rows],
    )


# ----------------------------------------------------------------- solvers


def solve_schur(sys: HessianSystem, damping: float = 0.0):
    """Increments via point elimination; equals the dense solve exactly.

    Levenberg damping scales the diagonals. Points with (damped) negligible
    information receive zero increments. Raises :class:`SolveFailure` when
    the reduced system is singular, so the caller can raise damping.
    """
    D = sys.H_ff.shape[0]
    H_ff = sys.H_ff + damping * np.diag(np.diag(sys.H_ff)) + 1e-12 * np.eye(D)
    H_pp = sys.H_pp * (1.0 + damping)
    act = H_pp > 1e-12
    H_fp_a = sys.H_fp[:, act]
    inv_pp = 1.0 / H_pp[act]
    H_sc = H_ff - (H_fp_a * inv_pp) @ H_fp_a.T
    b_sc = sys.b_f - H_fp_a @ (sys.b_p[act] * inv_pp)
    try:
        dx_f = np.linalg.solve(H_sc, -b_sc)
    except np.linalg.LinAlgError as e:
        raise SolveFailure(str(e)) from e
    if not np.all(np.isfinite(dx_f)):
        raise SolveFailure("non-finite frame increments")
    dx_p = np.zeros(len(sys.H_pp))
    dx_p[act] = -(sys.b_p[act] + sys.H_fp[:, act].T @ dx_f) * inv_pp
    return dx_f, dx_p


def solve_dense(sys: HessianSystem, damping: float = 0.0):
    """Reference solve of the full (frames + points) system."""
    D = sys.H_ff.shape[0]
    P = len(sys.H_pp)
    H = np.zeros((D + P, D + P))
    H[:D, :D] = sys.H_ff + damping * np.diag(np.diag(sys.H_ff)) + 1e-12 * np.eye(D)
    H[:D, D:] = sys.H_fp
    H[D:, :D] = sys.H_fp.T
    H[D:, D:] = np.diag(sys.H_pp * (1.0 + damping))
    b = np.concatenate([sys.b_f, sys.b_p])
    act = np.concatenate([np.ones(D, bool), sys.H_pp > 1e-12])
    dx = np.zeros(D + P)
    dx[act] = np.linalg.solve(H[np.ix_(act, act)], -b[act])
    return dx[:D], dx[D:]


def apply_increments(state: WindowState, dx_f: np.ndarray, dx_p: np.ndarray, ocfg: OptimizerConfig):
    for i, k in enumerate(state.keyframes):
        seg = dx_f[FRAME_DIM * i : FRAME_DIM * (i + 1)]
        k.pose = se3_exp(seg[:6]) @ k.pose
        k.affine = AffineBrightness(k.affine.a + seg[6], k.affine.b + seg[7])
    intr = state.cam.params.as_array() + dx_f[FRAME_DIM * len(state.keyframes) :]
    intr[0] = max(intr[0], 1e-3)
    intr[1] = max(intr[1], 1e-3)
    intr[4] = max(intr[4], 0.0)
    state.cam = state.cam.with_params(UnifiedOmniParams.from_array(intr))
    lo, hi = ocfg.d_clamp
    for p, dd in zip(state.points, dx_p):
        p.d = float(np.clip(p.d + dd, lo, hi))


def optimize_window(
    state: WindowState,
    residuals,
    ocfg: OptimizerConfig = OptimizerConfig(),
    max_iters: int | None = None,
):
    """Minimize the windowed energy; returns ``(state, final_energy, n_iters)``.

    Gauss-Newton with Levenberg damping: rejected steps restore the previous
    state and raise damping (up to ``lm_max_retries`` escalations per
    iteration); Huber weights are refreshed every evaluation.
    """
    if len(state.keyframes) < 2:
        raise ValueError("window optimization needs at least 2 keyframes")
    iters = max_iters if max_iters is not None else ocfg.max_iters
    lam = ocfg.lm_lambda_init
    data_e, evals = evaluate_all(state, residuals, update_states=True)
    energy = data_e + prior_energy(state, ocfg)
    n_done = 0
    for _ in range(iters):
        sys = build_system(state, residuals, ocfg, evals=evals)
        accepted = False
        for _retry in range(ocfg.lm_max_retries + 1):
            snap = state.snapshot()
            try:
                dx_f, dx_p = solve_schur(sys, damping=lam)
            except SolveFailure:
                lam *= ocfg.lm_lambda_up
                continue
            apply_increments(state, dx_f, dx_p, ocfg)
            # trial: flags are committed only if the step is kept
            data_new, evals_new = evaluate_all(state, residuals, update_states=False)
            e_new = data_new + prior_energy(state, ocfg)
            if e_new <= energy:
                accepted = True
                apply_residual_states(residuals, evals_new, state.rcfg)
                lam = max(lam / ocfg.lm_lambda_down, ocfg.lm_lambda_floor)
                break
            state.restore(snap)
            lam *= ocfg.lm_lambda_up
        if not accepted:
            break
        n_done += 1
        rel = (energy - e_new) / max(energy, 1e-12)
        energy, evals = e_new, evals_new
        if rel < ocfg.rel_decrease_tol:
            break
    return state, energy, n_done


# ----------------------------------------------------------- marginalization


def marginalize_system(H: np.ndarray, b: np.ndarray, keep: np.ndarray, drop: np.ndarray):
    """Schur-complement elimination of `drop` indices from (H, b).

    Exact for linear-Gaussian systems: the solution of the reduced system
    equals the corresponding entries of the full solve.
    """
    keep = np.asarray(keep, int)
    drop = np.asarray(drop, int)
    H_kk = H[np.ix_(keep, keep)]
    H_kd = H[np.ix_(keep, drop)]
    H_dd = H[np.ix_(drop, drop)]
    scale = max(float(np.max(np.abs(H_dd))), 1.0)
    H_dd_reg = H_dd + (1e-12 * scale) * np.eye(len(drop))
    sol = np.linalg.solve(H_dd_reg, np.concatenate([H_kd.T, b[drop][:, None]], axis=1))
    X = sol[:, :-1]
    y = sol[:, -1]
    H_new = H_kk - H_kd @ X
    b_new = b[keep] - H_kd @ y
    return 0.5 * (H_new + H_new.T), b_new


def clip_psd(H: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues (numerical dust)."""
    Hs = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(Hs)
    if w[0] >= floor:
        return Hs
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def marginalize(
    state: WindowState,
    residuals,
    drop_kf_id: int,
    drop_point_uids,
    ocfg: OptimizerConfig = OptimizerConfig(),
):
    """Absorb a keyframe and the named points into the prior.

    The dropped points' residuals are linearized at the current state (with
    first-estimate Jacobians for prior-connected variables) and eliminated
    together with the frame's 8 variables. Residuals of surviving points
    that merely reference the dropped frame are discarded, keeping points
    out of the prior (sparsity). Returns the surviving residual list.
    """
    drop_set = set(drop_point_uids)
    absorb = [
        r
        for r in residuals
        if r.state is ResidualState.ACTIVE and r.point in drop_set
    ]

    D = state.frame_dim()
    uids = sorted(drop_set)
    uid_col = {u: D + i for i, u in enumerate(uids)}
    n = D + len(uids)
    H = np.zeros((n, n))
    b = np.zeros(n)

    if absorb:
        _, evals = evaluate_all(state, absorb, update_states=False)
        sub_sys = _accumulate_marg(state, absorb, evals, uid_col, n, ocfg)
        H += sub_sys[0]
        b += sub_sys[1]

    # priors that must ride along with the dropped frame
    pos = state.kf_pos(drop_kf_id)
    kf = state.keyframes[pos]
    a_idx = FRAME_DIM * pos + 6
    H[a_idx, a_idx] += ocfg.affine_prior_a
    H[a_idx + 1, a_idx + 1] += ocfg.affine_prior_b
    b[a_idx] += ocfg.affine_prior_a * kf.affine.a
    b[a_idx + 1] += ocfg.affine_prior_b * kf.affine.b
    if state.prior is None and drop_kf_id == state.gauge_kf_id():
        base = FRAME_DIM * pos
        H[base : base + 6, base : base + 6] += ocfg.pose_gauge_weight * np.eye(6)

    if state.prior is not None:
        cols = _prior_index_map(state, state.prior)
        dx = prior_deviation(state, state.prior)
        H[np.ix_(cols, cols)] += state.prior.H
        b[cols] += state.prior.b + state.prior.H @ dx

    frame_cols = np.arange(FRAME_DIM * pos, FRAME_DIM * (pos + 1))
    drop_cols = np.concatenate([frame_cols, np.arange(D, n)])
    keep_cols = np.array([i for i in range(n) if i not in set(drop_cols)], int)
    H_new, b_new = marginalize_system(H, b, keep_cols, drop_cols)
    H_new = clip_psd(H_new)

    # first-estimate points: fixed where already set, current otherwise
    keys = []
    lin = {}
    for k in state.keyframes:
        if k.kf_id == drop_kf_id:
            continue
        keys.append(("kf", k.kf_id))
        if k.lin_pose is None:
            k.lin_pose = k.pose.copy()
            k.lin_affine = AffineBrightness(k.affine.a, k.affine.b)
        lin[("kf", k.kf_id)] = (k.pose.copy(), AffineBrightness(k.affine.a, k.affine.b))
    keys.append(("intr",))
    lin[("intr",)] = state.cam.params.as_array()
    if state.lin_intr is None:
        state.lin_intr = state.cam.params.as_array()

    state.prior = MarginalizationPrior(keys, H_new, b_new, lin)
    state.keyframes.pop(pos)
    state.points = [p for p in state.points if p.uid not in drop_set]
    survivors = [
        r
        for r in residuals
        if r.point not in drop_set and r.host != drop_kf_id and r.target != drop_kf_id
    ]
    return survivors


def _accumulate_marg(state, residuals, evals, uid_col, n, ocfg):
    """J^T W J over the given residuals in the marginalization layout."""
    H = np.zeros((n, n))
    b = np.zeros(n)
    intr_sl = slice(FRAME_DIM * len(state.keyframes), state.frame_dim())
    for (h, t), (idxs, ev) in evals.items():
        live = np.array([j for j in range(len(idxs)) if ev.valid[j]], int)
        if len(live) == 0:
            continue
        kf_h, kf_t = state.kf(h), state.kf(t)
        pose_h, aff_h = _jac_args(state, kf_h, ocfg)
        pose_t, aff_t = _jac_args(state, kf_t, ocfg)
        cam_j = _jac_cam(state, ocfg)
        pts = [state.point(residuals[idxs[j]].point) for j in live]
        ds = np.array([p.d for p in pts])
        sub = _slice_batch(ev, live)
        J = jacobian_batch(
            sub, pose_h, pose_t, aff_h, aff_t, ds, cam_j,
            kf_h.image.exposure_t, kf_t.image.exposure_t,
        )
        w = sub.w_irls
        r = sub.r
        Jh = np.concatenate([J.pose_host, J.affine_host], axis=-1)
        Jt = np.concatenate([J.pose_target, J.affine_target], axis=-1)
        sl_h = slice(FRAME_DIM * state.kf_pos(h), FRAME_DIM * state.kf_pos(h) + FRAME_DIM)
        sl_t = slice(FRAME_DIM * state.kf_pos(t), FRAME_DIM * state.kf_pos(t) + FRAME_DIM)
        blocks = [(sl_h, Jh), (sl_t, Jt), (intr_sl, J.intrinsics)]
        for sa, Ja in blocks:
            for sb, Jb in blocks:
                H[sa, sb] += np.einsum("nka,nk,nkb->ab", Ja, w, Jb)
            b[sa] += np.einsum("nka,nk->a", Ja, w * r)
        cols = np.array([uid_col[p.uid] for p in pts])
        wJd = w * J.d
        for sa, Ja in blocks:
            blk = np.einsum("nka,nk->na", Ja, wJd)
            rows = np.arange(sa.start, sa.stop)
            np.add.at(H, (rows[:, None], cols[None, :]), blk.T)
            np.add.at(H, (cols[:, None], rows[None, :]), blk)
        np.add.at(H, (cols, cols), np.einsum("nk,nk->n", wJd, J.d))
        np.add.at(b, cols, np.einsum("nk,nk->n", wJd, r))
    return H, b
