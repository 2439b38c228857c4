"""Front end and frame management: tracking, keyframe policy, candidate
lifecycle, and the sliding-window orchestration.

Flow per frame: coarse-to-fine direct alignment against the latest keyframe
(constant-velocity prior with fallbacks), epipolar refinement of the latest
keyframe's candidate distances, and, when the observed change is large
enough, keyframe creation: candidate selection, marginalization policy,
activation, windowed optimization, and frame/point marginalization.

Everything here runs single-threaded and deterministically given identical
inputs and configuration; a two-thread tracking/mapping split is available
via :class:`ThreadedOdometry` for throughput (non-deterministic ordering).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .camera import CameraModel, is_in_fov, omni_project, omni_project_jacobian, omni_unproject_ray
from .epipolar import EpipolarConfig, make_segment, refine_batch, search
from .geometry import SE3, Trajectory, se3_exp
from .image import Image, Pyramid, build_pyramid, interp
from .optimizer import (
    KeyframeState,
    OptimizerConfig,
    WindowState,
    make_active_point,
    marginalize,
    optimize_window,
)
from .residuals import (
    PATTERN_OFFSETS,
    AffineBrightness,
    PhotoResidual,
    ResidualConfig,
    ResidualState,
    huber_weight,
)


class PointStatus(Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    MARGINALIZED = "marginalized"
    DROPPED = "dropped"


@dataclass
class HostedPoint:
    """A pixel with an inverse-distance estimate hosted in one keyframe."""

    host_kf: int
    pixel: np.ndarray
    d: float = 1.0
    sigma_d: float = float("inf")
    d_lo: float = 0.0  # first observation searches the [0, 10] prior interval
    d_hi: float = 10.0
    status: PointStatus = PointStatus.CANDIDATE
    n_success: int = 0
    n_fail: int = 0
    uid: int | None = None  # window uid once activated


@dataclass
class WindowPolicyConfig:
    n_f: int = 7
    visibility_min: float = 0.05
    candidate_count: int = 800
    activation_target: int = 2000
    grid_cells: int = 32
    min_grad: float = 7.0
    activation_sigma_rel: float = 0.25
    max_match_failures: int = 8
    distance_score_eps: float = 1e-5
    kf_weight_flow: float = 0.05
    kf_weight_flow_t: float = 0.05
    kf_weight_affine: float = 2.0


@dataclass
class TrackerConfig:
    levels: int = 5
    iters_per_level: int = 12
    gamma: float = 9.0
    min_points: int = 50
    max_ref_points: int = 1200
    lost_rmse: float = 25.0
    min_median_grad: float = 1.0  # image must constrain the alignment
    affine_prior_a: float = 1e3  # keeps (a, b) from explaining the image alone
    affine_prior_b: float = 10.0
    lm_lambda_init: float = 1e-4


@dataclass
class Keyframe:
    kf_id: int
    frame_id: int
    timestamp: float
    pyramid: Pyramid
    candidates: list = field(default_factory=list)


@dataclass
class TrackResult:
    ok: bool
    rel: SE3  # new camera <- reference keyframe camera
    affine: AffineBrightness
    rmse: float
    n_valid: int
    flow: float
    flow_t: float
    delta_a: float


def select_candidates(
    pyramid: Pyramid, cam: CameraModel, cfg: WindowPolicyConfig, kf_id: int
) -> list:
    """Grid-distributed high-gradient pixels of the full image domain.

    One pixel per grid cell at an adaptive threshold (cell median plus a
    floor); if more cells qualify than the target count, the strongest
    gradients win. The FoV-invalid border (pattern radius + 2 px) is excluded.
    """
    img = pyramid.levels[0]
    gx, gy = img.gradients()
    mag = np.hypot(gx, gy)
    margin = 4
    h, w = img.height, img.width
    cell_h = max(h // cfg.grid_cells, 4)
    cell_w = max(w // cfg.grid_cells, 4)
    picks = []
    for cy in range(0, h - cell_h + 1, cell_h):
        for cx in range(0, w - cell_w + 1, cell_w):
            block = mag[cy : cy + cell_h, cx : cx + cell_w]
            idx = int(np.argmax(block))
            by, bx = divmod(idx, block.shape[1])
            u, v = cx + bx, cy + by
            if not (margin <= u < w - margin and margin <= v < h - margin):
                continue
            g = block[by, bx]
            med = float(np.median(block))
            if g > med + cfg.min_grad:
                picks.append((float(g), u, v))
    picks.sort(reverse=True)
    picks = picks[: cfg.candidate_count]
    return [
        HostedPoint(host_kf=kf_id, pixel=np.array([float(u), float(v)])) for _, u, v in picks
    ]


class CoarseTracker:
    """Direct image alignment of a new frame against the latest keyframe's
    sparse distance map, coarse-to-fine over the pyramid."""

    def __init__(self, cam: CameraModel, cfg: TrackerConfig):
        self.cam = cam
        self.cfg = cfg
        self.ref_kf: Keyframe | None = None
        self.ref_pose: SE3 | None = None  # world -> ref camera
        self.ref_affine = AffineBrightness()
        self.ref_exposure = 1.0
        self._levels = []

    def set_reference(self, kf: Keyframe, pose_cw: SE3, affine: AffineBrightness, points):
        """`points` is (pixels (N,2), inv distances (N,)) in the ref keyframe."""
        self.ref_kf = kf
        self.ref_pose = pose_cw
        self.ref_affine = affine
        self.ref_exposure = kf.pyramid.exposure_t
        pixels, d = points
        if len(pixels) > self.cfg.max_ref_points:
            idx = np.linspace(0, len(pixels) - 1, self.cfg.max_ref_points).astype(int)
            pixels, d = pixels[idx], d[idx]
        rays, ok = omni_unproject_ray(pixels, self.cam.params)
        x_ref = rays / d[:, None]
        self._levels = []
        for lvl in range(self.cfg.levels):
            cam_l = self.cam.scaled(lvl)
            img_l = kf.pyramid.levels[lvl]
            s = 0.5**lvl
            uv_l = (pixels + 0.5) * s - 0.5
            inten, _, _, valid = interp(img_l, uv_l)
            use = ok & valid
            self._levels.append((cam_l, img_l, x_ref[use], inten[use]))

    def n_ref_points(self) -> int:
        return len(self._levels[0][2]) if self._levels else 0

    def track(self, pyramid: Pyramid, inits) -> TrackResult:
        """Try each initial relative pose; keep the first that converges."""
        best = None
        for rel0 in inits:
            res = self._track_single(pyramid, rel0)
            if res.ok:
                return res
            if best is None or res.rmse < best.rmse:
                best = res
        return best

    def _track_single(self, pyramid: Pyramid, rel0: SE3) -> TrackResult:
        rel = rel0.copy()
        aff = AffineBrightness()
        cfg = self.cfg
        exp_new = pyramid.exposure_t
        for lvl in range(cfg.levels - 1, -1, -1):
            cam_l, _, x_ref, inten_ref = self._levels[lvl]
            if len(x_ref) < 10:
                continue
            img_new = pyramid.levels[lvl]
            lam = cfg.lm_lambda_init
            energy, _ = self._residuals(img_new, cam_l, x_ref, inten_ref, rel, aff, exp_new)
            for _ in range(cfg.iters_per_level):
                H, b, ok_any = self._system(img_new, cam_l, x_ref, inten_ref, rel, aff, exp_new)
                if not ok_any:
                    break
                try:
                    dx = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-9 * np.eye(8), -b)
                except np.linalg.LinAlgError:
                    break
                rel_new = se3_exp(dx[:6]) @ rel
                aff_new = AffineBrightness(aff.a + dx[6], aff.b + dx[7])
                e_new, _ = self._residuals(img_new, cam_l, x_ref, inten_ref, rel_new, aff_new, exp_new)
                if e_new <= energy:
                    rel, aff = rel_new, aff_new
                    step = energy - e_new
                    energy = e_new
                    lam = max(lam / 2.0, 1e-6)
                    if step < 1e-4 * max(energy, 1e-9):
                        break
                else:
                    lam *= 6.0

        rmse, n_valid, med_grad = self._rmse(pyramid.levels[0], self._levels[0][0],
                                             self._levels[0][2], self._levels[0][3], rel, aff, exp_new)
        flow, flow_t = self._flow_stats(rel)
        ok = (
            n_valid >= cfg.min_points
            and rmse < cfg.lost_rmse
            and med_grad >= cfg.min_median_grad
        )
        return TrackResult(ok, rel, aff, rmse, n_valid,
                           flow, flow_t, abs(aff.a - self.ref_affine.a))

    def _project(self, cam_l, x_ref, rel):
        x_new = x_ref @ rel.R.T + rel.t
        uv, ok = omni_project(x_new, cam_l.params)
        return x_new, uv, ok

    def _residuals(self, img_new, cam_l, x_ref, inten_ref, rel, aff, exp_new):
        x_new, uv, ok = self._project(cam_l, x_ref, rel)
        inten, _, _, valid = interp(img_new, uv)
        use = ok & valid
        s = (exp_new / self.ref_exposure) * math.exp(aff.a - self.ref_affine.a)
        r = (inten - aff.b) - s * (inten_ref - self.ref_affine.b)
        w = huber_weight(r, self.cfg.gamma)
        r2 = np.where(use, w * r * r, self.cfg.gamma**2)
        prior = self.cfg.affine_prior_a * aff.a**2 + self.cfg.affine_prior_b * aff.b**2
        return float(np.mean(r2) + prior / max(len(r), 1)), use

    def _system(self, img_new, cam_l, x_ref, inten_ref, rel, aff, exp_new):
        x_new, uv, ok = self._project(cam_l, x_ref, rel)
        inten, gx, gy, valid = interp(img_new, uv)
        use = ok & valid
        if np.sum(use) < 8:
            return np.zeros((8, 8)), np.zeros(8), False
        x_new, uv = x_new[use], uv[use]
        g = np.stack([gx[use], gy[use]], axis=-1)
        s = (exp_new / self.ref_exposure) * math.exp(aff.a - self.ref_affine.a)
        r = (inten[use] - aff.b) - s * (inten_ref[use] - self.ref_affine.b)
        w = huber_weight(r, self.cfg.gamma)
        Jpi = omni_project_jacobian(x_new, cam_l.params)
        g_geo = np.einsum("nc,ncd->nd", g, Jpi)
        J = np.empty((len(x_new), 8))
        J[:, :3] = np.cross(x_new, g_geo)
        J[:, 3:6] = g_geo
        J[:, 6] = -s * (inten_ref[use] - self.ref_affine.b)
        J[:, 7] = -1.0
        H = (J * w[:, None]).T @ J
        b = (J * w[:, None]).T @ r
        H[6, 6] += self.cfg.affine_prior_a
        H[7, 7] += self.cfg.affine_prior_b
        b[6] += self.cfg.affine_prior_a * aff.a
        b[7] += self.cfg.affine_prior_b * aff.b
        return H, b, True

    def _rmse(self, img_new, cam_l, x_ref, inten_ref, rel, aff, exp_new):
        x_new, uv, ok = self._project(cam_l, x_ref, rel)
        inten, gx, gy, valid = interp(img_new, uv)
        use = ok & valid
        if np.sum(use) == 0:
            return float("inf"), 0, 0.0
        s = (exp_new / self.ref_exposure) * math.exp(aff.a - self.ref_affine.a)
        r = (inten[use] - aff.b) - s * (inten_ref[use] - self.ref_affine.b)
        med_grad = float(np.median(np.hypot(gx[use], gy[use])))
        return float(np.sqrt(np.mean(r * r))), int(np.sum(use)), med_grad

    def _flow_stats(self, rel):
        cam0, _, x_ref, _ = self._levels[0]
        if len(x_ref) == 0:
            return 0.0, 0.0
        uv_ref, ok0 = omni_project(x_ref, cam0.params)
        uv_full, ok1 = self._project(cam0, x_ref, rel)[1:]
        x_t = x_ref + rel.t
        uv_trans, ok2 = omni_project(x_t, cam0.params)
        use = ok0 & ok1 & ok2
        if np.sum(use) == 0:
            return float("inf"), float("inf")
        flow = float(np.mean(np.linalg.norm(uv_full[use] - uv_ref[use], axis=1)))
        flow_t = float(np.mean(np.linalg.norm(uv_trans[use] - uv_ref[use], axis=1)))
        return flow, flow_t


def need_keyframe(result: TrackResult, cfg: WindowPolicyConfig) -> bool:
    """Weighted scene/brightness change score against the latest keyframe."""
    score = (
        cfg.kf_weight_flow * result.flow
        + cfg.kf_weight_flow_t * result.flow_t
        + cfg.kf_weight_affine * result.delta_a
    )
    return score > 1.0


def refine_candidates(
    kf: Keyframe,
    kf_pose: SE3,
    kf_affine: AffineBrightness,
    frame_pyr: Pyramid,
    frame_pose: SE3,
    frame_affine: AffineBrightness,
    cam: CameraModel,
    ecfg: EpipolarConfig,
    policy: WindowPolicyConfig,
):
    """One epipolar-search update of the keyframe's candidate intervals.

    First observations run the full discrete curve search over the prior
    interval (with ambiguity checks); candidates that already hold an
    estimate are polished jointly by the batched distance refinement.
    """
    rel = frame_pose @ kf_pose.inverse()
    stats = {"found": 0, "skipped": 0, "failed": 0}
    if np.linalg.norm(rel.t) < 1e-9:
        stats["skipped"] = sum(p.status is PointStatus.CANDIDATE for p in kf.candidates)
        return stats
    img_h = kf.pyramid.levels[0]
    img_t = frame_pyr.levels[0]
    aff_h = (kf_affine.a, kf_affine.b)
    aff_t = (frame_affine.a, frame_affine.b)

    def fuse(pt, d_new, sigma_new):
        pt.n_success += 1
        if pt.n_success > 1 and np.isfinite(pt.sigma_d):
            w1, w2 = 1.0 / pt.sigma_d**2, 1.0 / max(sigma_new, 1e-9) ** 2
            pt.d = (w1 * pt.d + w2 * d_new) / (w1 + w2)
            pt.sigma_d = math.sqrt(1.0 / (w1 + w2))
        else:
            pt.d = d_new
            pt.sigma_d = sigma_new
        pt.d_lo = max(pt.d - 2.0 * pt.sigma_d, 1e-6)
        pt.d_hi = min(max(pt.d + 2.0 * pt.sigma_d, pt.d_lo + 1e-6), ecfg.d_cap)

    def fail(pt):
        pt.n_fail += 1
        if pt.n_fail > policy.max_match_failures and pt.n_success == 0:
            pt.status = PointStatus.DROPPED
        stats["failed"] += 1

    wide = [p for p in kf.candidates if p.status is PointStatus.CANDIDATE and p.n_success == 0]
    narrow = [p for p in kf.candidates if p.status is PointStatus.CANDIDATE and p.n_success > 0]

    for pt in wide:
        try:
            seg = make_segment(pt.pixel, rel, pt.d_lo, pt.d_hi, cam)
        except ValueError:
            pt.status = PointStatus.DROPPED
            continue
        res = search(seg, img_h, img_t, PATTERN_OFFSETS, cam, aff_h, aff_t, ecfg)
        if res.status == "degenerate":
            stats["skipped"] += 1
        elif res.status == "found":
            fuse(pt, res.d_refined, res.sigma_d)
            stats["found"] += 1
        else:
            fail(pt)

    if narrow:
        pixels = np.array([p.pixel for p in narrow])
        d0 = np.array([p.d for p in narrow])
        d_new, sigma, rms, valid = refine_batch(
            pixels, d0, img_h, img_t, rel, cam, PATTERN_OFFSETS, aff_h, aff_t, ecfg
        )
        good = valid & (rms < 4.0 * ecfg.sigma_photo)
        for pt, dn, sn, g in zip(narrow, d_new, sigma, good):
            if g:
                fuse(pt, float(dn), float(sn))
                stats["found"] += 1
            else:
                fail(pt)
    return stats


def marginalize_policy(window: WindowState, policy: WindowPolicyConfig, hosted_active):
    """Keyframes to drop: low visibility in the latest keyframe first, then
    the lowest distance score ``sqrt(d(i, latest)) / sum((d(i, k) + eps)^-1)``
    while the window exceeds ``n_f``. The latest two keyframes are kept."""
    kfs = window.keyframes
    if len(kfs) <= 2:
        return []
    latest = kfs[-1]
    protected = {kfs[-1].kf_id, kfs[-2].kf_id}
    drops = []

    for kf in kfs[:-2]:
        pts = hosted_active.get(kf.kf_id, [])
        if not pts:
            continue
        rel = latest.pose @ kf.pose.inverse()
        pixels = np.array([p.pixel for p in pts])
        ds = np.array([max(p.d, 1e-6) for p in pts])
        rays, _ = omni_unproject_ray(pixels, window.cam.params)
        x_latest = (rays / ds[:, None]) @ rel.R.T + rel.t
        vis = float(np.mean(is_in_fov(x_latest, window.cam)))
        if vis < policy.visibility_min:
            drops.append(kf.kf_id)

    n_after = len(kfs) - len(drops)
    if n_after > policy.n_f:
        centers = {k.kf_id: k.pose.inverse().t for k in kfs}
        latest_c = centers[latest.kf_id]
        eps = policy.distance_score_eps
        scores = []
        for kf in kfs[:-2]:
            if kf.kf_id in drops:
                continue
            c = centers[kf.kf_id]
            inv_sum = 0.0
            for other in kfs:
                if other.kf_id == kf.kf_id:
                    continue
                inv_sum += 1.0 / (np.linalg.norm(c - centers[other.kf_id]) + eps)
            score = math.sqrt(np.linalg.norm(c - latest_c)) / inv_sum
            scores.append((score, kf.kf_id))
        scores.sort()
        for _, kf_id in scores[: n_after - policy.n_f]:
            drops.append(kf_id)
    return [k for k in drops if k not in protected]


def activate_candidates(
    window: WindowState,
    residuals: list,
    keyframes: dict,
    policy: WindowPolicyConfig,
):
    """Promote converged candidates to the optimization, preferring pixels
    far from already-active points in the latest keyframe."""
    need = policy.activation_target - len(window.points)
    if need <= 0 or not window.keyframes:
        return []
    latest = window.keyframes[-1]
    cam = window.cam

    def project_latest(host_id, pixels, ds):
        rel = latest.pose @ window.kf(host_id).pose.inverse()
        rays, _ = omni_unproject_ray(np.atleast_2d(pixels), cam.params)
        x = (rays / np.atleast_1d(ds)[:, None]) @ rel.R.T + rel.t
        uv, ok = omni_project(x, cam.params)
        ok = ok & is_in_fov(x, cam)
        return uv, ok

    occupied = []
    by_host = {}
    for p in window.points:
        by_host.setdefault(p.host_id, []).append(p)
    for host_id, pts in by_host.items():
        uv, ok = project_latest(
            host_id, np.array([p.pixel for p in pts]), np.array([p.d for p in pts])
        )
        occupied.extend(uv[ok])
    occupied = np.array(occupied) if occupied else np.zeros((0, 2))

    ranked = []
    for kf_id, kf in keyframes.items():
        if kf_id not in [k.kf_id for k in window.keyframes]:
            continue
        for pt in kf.candidates:
            if pt.status is not PointStatus.CANDIDATE or pt.n_success == 0:
                continue
            if not np.isfinite(pt.sigma_d) or pt.sigma_d > policy.activation_sigma_rel * pt.d:
                continue
            uv, ok = project_latest(kf_id, pt.pixel[None, :], np.array([pt.d]))
            if not ok[0]:
                continue
            if len(occupied):
                dist = float(np.min(np.linalg.norm(occupied - uv[0], axis=1)))
            else:
                dist = 1e9
            ranked.append((dist, kf_id, pt))
    ranked.sort(key=lambda t: -t[0])

    activated = []
    for dist, kf_id, pt in ranked[:need]:
        try:
            ap = make_active_point(window, kf_id, pt.pixel, pt.d, pt.sigma_d)
        except ValueError:
            pt.status = PointStatus.DROPPED
            continue
        window.points.append(ap)
        pt.status = PointStatus.ACTIVE
        pt.uid = ap.uid
        for kf in window.keyframes:
            if kf.kf_id != kf_id:
                residuals.append(PhotoResidual(host=kf_id, target=kf.kf_id, point=ap.uid))
        activated.append(ap)
    return activated


@dataclass
class BootstrapConfig:
    min_flow_t: float = 4.0  # px of translation-induced flow before accepting
    min_points: int = 120
    max_rmse: float = 12.0
    iters_per_level: int = 25
    d_init: float = 1.0
    d_clamp: tuple = (0.05, 20.0)


class Bootstrapper:
    """Two-frame initializer: joint direct alignment of relative pose and
    per-point inverse distances, coarse-to-fine, warm-started across frames."""

    def __init__(self, cam: CameraModel, policy: WindowPolicyConfig,
                 cfg: BootstrapConfig = BootstrapConfig()):
        self.cam = cam
        self.policy = policy
        self.cfg = cfg
        self.first: tuple | None = None  # (frame_id, ts, pyramid)
        self.points_px: np.ndarray | None = None
        self.rel = SE3.identity()
        self.d: np.ndarray | None = None

    def set_first(self, frame_id, ts, pyramid: Pyramid):
        self.first = (frame_id, ts, pyramid)
        cands = select_candidates(pyramid, self.cam, self.policy, kf_id=-1)
        self.points_px = np.array([c.pixel for c in cands])
        self.d = np.full(len(cands), self.cfg.d_init)
        self.rel = SE3.identity()

    def _joint_step(self, img_ref, img_new, cam_l, pixels_l, rel, d, lam):
        """One damped Gauss-Newton step of pose + distances at one level."""
        from .residuals import ResidualConfig, evaluate_batch, jacobian_batch

        rcfg = ResidualConfig()
        aff = AffineBrightness()
        ev = evaluate_batch(
            img_ref, img_new, SE3.identity(), rel, aff, aff, pixels_l, d, cam_l, rcfg
        )
        n_valid = int(np.sum(ev.valid))
        energy = float(np.sum(ev.energy)) + rcfg.gamma**2 * 8 * int(np.sum(~ev.valid))
        if n_valid < 30:
            return None, energy, n_valid
        J = jacobian_batch(ev, SE3.identity(), rel, aff, aff, d, cam_l, 1.0, 1.0)
        w = ev.w_irls * ev.valid[:, None]
        Jt = J.pose_target
        H_ff = np.einsum("nka,nk,nkb->ab", Jt, w, Jt)
        b_f = np.einsum("nka,nk->a", Jt, w * ev.r)
        wJd = w * J.d
        H_fp = np.einsum("nka,nk->na", Jt, wJd).T
        H_pp = np.einsum("nk,nk->n", wJd, J.d)
        b_p = np.einsum("nk,nk->n", wJd, ev.r)
        act = H_pp > 1e-12
        inv_pp = np.zeros_like(H_pp)
        inv_pp[act] = 1.0 / (H_pp[act] * (1 + lam))
        H_sc = H_ff + lam * np.diag(np.diag(H_ff)) - (H_fp * inv_pp) @ H_fp.T
        b_sc = b_f - H_fp @ (b_p * inv_pp)
        try:
            dxf = np.linalg.solve(H_sc + 1e-9 * np.eye(6), -b_sc)
        except np.linalg.LinAlgError:
            return None, energy, n_valid
        dxp = -(b_p + H_fp.T @ dxf) * inv_pp
        return (dxf, dxp), energy, n_valid

    def _joint_energy(self, img_ref, img_new, cam_l, pixels_l, rel, d):
        from .residuals import ResidualConfig, evaluate_batch

        rcfg = ResidualConfig()
        aff = AffineBrightness()
        ev = evaluate_batch(
            img_ref, img_new, SE3.identity(), rel, aff, aff, pixels_l, d, cam_l, rcfg
        )
        return float(np.sum(ev.energy)) + rcfg.gamma**2 * 8 * int(np.sum(~ev.valid)), ev

    def try_init(self, pyramid: Pyramid):
        """Returns ``(rel, pixels, d)`` once parallax suffices, else None.

        Pattern residuals (8 per point) keep the joint pose-plus-distance
        problem overdetermined; a single pixel per point would leave N
        equations against N + 6 unknowns.
        """
        if self.first is None or len(self.points_px) < self.cfg.min_points:
            return None
        cfg = self.cfg
        ref_pyr = self.first[2]
        rays, ok = omni_unproject_ray(self.points_px, self.cam.params)
        rel = self.rel.copy()
        d = self.d.copy()
        for lvl in range(4, -1, -1):
            cam_l = self.cam.scaled(lvl)
            img_ref = ref_pyr.levels[lvl]
            img_new = pyramid.levels[lvl]
            s = 0.5**lvl
            pixels_l = (self.points_px + 0.5) * s - 0.5
            lam = 1e-3
            e_prev = None
            for _ in range(cfg.iters_per_level):
                step, energy, n_valid = self._joint_step(
                    img_ref, img_new, cam_l, pixels_l, rel, d, lam
                )
                if step is None:
                    break
                e_prev = energy if e_prev is None else e_prev
                dxf, dxp = step
                rel_new = se3_exp(dxf) @ rel
                d_new = np.clip(d + dxp, *cfg.d_clamp)
                e_new, _ = self._joint_energy(img_ref, img_new, cam_l, pixels_l, rel_new, d_new)
                if e_new <= e_prev:
                    rel, d = rel_new, d_new
                    decrease = e_prev - e_new
                    e_prev = e_new
                    lam = max(lam / 2, 1e-6)
                    if decrease < 1e-4 * max(e_prev, 1e-9):
                        break
                else:
                    lam *= 8.0

        self.rel, self.d = rel, d  # warm start for the next attempt

        # convergence and parallax checks at full resolution
        x_ref = rays / d[:, None]
        x_new = x_ref @ rel.R.T + rel.t
        uv, okp = omni_project(x_new, self.cam.params)
        inten, _, _, vi = interp(pyramid.levels[0], uv)
        ref_int, _, _, v_ref = interp(ref_pyr.levels[0], self.points_px)
        use = ok & v_ref & okp & vi
        if np.sum(use) < self.cfg.min_points:
            return None
        rmse = float(np.sqrt(np.mean((inten[use] - ref_int[use]) ** 2)))
        uv_ref, _ = omni_project(x_ref, self.cam.params)
        x_trans = x_ref + rel.t
        uv_t, ok_t = omni_project(x_trans, self.cam.params)
        flow_t = float(np.mean(np.linalg.norm(uv_t[use & ok_t] - uv_ref[use & ok_t], axis=1)))
        if rmse > self.cfg.max_rmse or flow_t < self.cfg.min_flow_t:
            return None

        # fix the monocular gauge: mean inverse distance = 1
        gamma = float(np.mean(d[use]))
        d = d / gamma
        rel = SE3.from_Rt(rel.R, rel.t * gamma)
        return rel, self.points_px[use], d[use]


@dataclass
class SystemConfig:
    cam: CameraModel
    policy: WindowPolicyConfig = field(default_factory=WindowPolicyConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    epipolar: EpipolarConfig = field(default_factory=EpipolarConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    deterministic: bool = True
    seed: int = 0


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    status: str  # init | tracked | keyframe | lost
    pose_cw: SE3 | None = None
    track_ms: float = 0.0
    refine_ms: float = 0.0
    map_ms: float = 0.0
    rmse: float = 0.0
    n_points: int = 0


class OdometrySystem:
    """Single-threaded deterministic odometry over a frame stream."""

    def __init__(self, config: SystemConfig):
        self.cfg = config
        self.window = WindowState(config.cam, config.residual)
        self.residuals: list[PhotoResidual] = []
        self.keyframes: dict[int, Keyframe] = {}
        self.archived: list[tuple[float, SE3, int]] = []  # (ts, pose_cw, kf_id)
        self.tracker = CoarseTracker(config.cam, config.tracker)
        self.bootstrapper = Bootstrapper(config.cam, config.policy, config.bootstrap)
        self.records: list[FrameRecord] = []
        self.initialized = False
        self.lost = False
        self._next_kf_id = 0
        self._last_pose_cw: SE3 | None = None
        self._motion = SE3.identity()  # frame-to-frame prediction

    # ------------------------------------------------------------ plumbing
    def _hosted_active(self):
        by_host: dict[int, list] = {}
        for p in self.window.points:
            by_host.setdefault(p.host_id, []).append(p)
        return by_host

    def _rebuild_tracking_ref(self):
        latest = self.window.keyframes[-1]
        kf = self.keyframes[latest.kf_id]
        pixels, ds = [], []
        for p in self.window.points:
            rel = latest.pose @ self.window.kf(p.host_id).pose.inverse()
            ray, _ = omni_unproject_ray(p.pixel, self.window.cam.params)
            x = rel.act(ray / p.d)
            uv, ok = omni_project(x, self.window.cam.params)
            if ok and is_in_fov(x, self.window.cam):
                pixels.append(uv)
                ds.append(1.0 / np.linalg.norm(x))
        for c in kf.candidates:
            if c.status is PointStatus.CANDIDATE and c.n_success > 0:
                pixels.append(c.pixel)
                ds.append(c.d)
        if not pixels:
            pixels, ds = [np.array([1.0, 1.0])], [1.0]
        self.tracker.set_reference(
            kf, latest.pose, latest.affine, (np.array(pixels), np.array(ds))
        )

    def _make_keyframe(self, frame_id, ts, pyramid, pose_cw, affine):
        kf_id = self._next_kf_id
        self._next_kf_id += 1
        kf = Keyframe(kf_id, frame_id, ts, pyramid)
        kf.candidates = select_candidates(pyramid, self.cfg.cam, self.cfg.policy, kf_id)
        self.keyframes[kf_id] = kf
        self.window.keyframes.append(
            KeyframeState(kf_id, ts, pyramid, pose_cw, affine)
        )
        # residuals of existing points toward the new keyframe
        for p in self.window.points:
            self.residuals.append(PhotoResidual(host=p.host_id, target=kf_id, point=p.uid))
        return kf

    def _marginalize_frames(self):
        drops = marginalize_policy(self.window, self.cfg.policy, self._hosted_active())
        latest_two = {k.kf_id for k in self.window.keyframes[-2:]}
        for kf_id in drops:
            drop_uids = [p.uid for p in self.window.points if p.host_id == kf_id]
            # also absorb points no longer observed in the latest two keyframes
            seen = set()
            for r in self.residuals:
                if r.state is ResidualState.ACTIVE and r.target in latest_two:
                    seen.add(r.point)
            for p in self.window.points:
                if p.host_id in latest_two:
                    continue
                if p.uid not in seen and p.uid not in drop_uids:
                    drop_uids.append(p.uid)
            # pose frozen at its estimate when leaving the window
            frozen_pose = self.window.kf(kf_id).pose.copy()
            self.residuals = marginalize(
                self.window, self.residuals, kf_id, drop_uids, self.cfg.optimizer
            )
            state_kf = self.keyframes[kf_id]
            drop_set = set(drop_uids)
            for c in state_kf.candidates:
                if c.status is PointStatus.CANDIDATE:
                    c.status = PointStatus.DROPPED
                elif c.status is PointStatus.ACTIVE and c.uid in drop_set:
                    c.status = PointStatus.MARGINALIZED
            self.archived.append((state_kf.timestamp, frozen_pose, kf_id))

    # ---------------------------------------------------------- main entry
    def process_frame(self, frame_id: int, timestamp: float, image: Image) -> FrameRecord:
        pyramid = build_pyramid(image)
        rec = FrameRecord(frame_id, timestamp, status="init")

        if not self.initialized:
            t0 = time.perf_counter()
            if self.bootstrapper.first is None:
                self.bootstrapper.set_first(frame_id, timestamp, pyramid)
                self._first_frame = (frame_id, timestamp, pyramid)
                self._boot_attempts = 0
            else:
                got = self.bootstrapper.try_init(pyramid)
                if got is not None:
                    self._finish_bootstrap(frame_id, timestamp, pyramid, got)
                    rec.status = "keyframe"
                    rec.pose_cw = self.window.keyframes[-1].pose.copy()
                else:
                    self._boot_attempts += 1
                    if self._boot_attempts > 40:  # stale reference, start over
                        self.bootstrapper.set_first(frame_id, timestamp, pyramid)
                        self._first_frame = (frame_id, timestamp, pyramid)
                        self._boot_attempts = 0
            rec.map_ms = 1e3 * (time.perf_counter() - t0)
            self.records.append(rec)
            return rec

        # ------------------------------------------------------- tracking
        t0 = time.perf_counter()
        latest = self.window.keyframes[-1]
        pred = self._motion @ self._last_pose_cw if self._last_pose_cw else latest.pose
        inits = [pred @ latest.pose.inverse()]
        inits.append((self._motion @ pred) @ latest.pose.inverse())  # double motion
        inits.append(self._last_pose_cw @ latest.pose.inverse() if self._last_pose_cw else SE3.identity())
        inits.append(SE3.identity())
        result = self.tracker.track(pyramid, inits)
        rec.track_ms = 1e3 * (time.perf_counter() - t0)
        rec.rmse = result.rmse
        rec.n_points = result.n_valid

        if not result.ok:
            rec.status = "lost"
            self.lost = True
            self.records.append(rec)
            return rec
        self.lost = False

        pose_cw = result.rel @ latest.pose
        rec.pose_cw = pose_cw.copy()
        rec.status = "tracked"
        if self._last_pose_cw is not None:
            self._motion = pose_cw @ self._last_pose_cw.inverse()
        self._last_pose_cw = pose_cw

        # -------------------------------------------- candidate refinement
        t0 = time.perf_counter()
        kf = self.keyframes[latest.kf_id]
        refine_candidates(
            kf, latest.pose, latest.affine, pyramid, pose_cw, result.affine,
            self.cfg.cam, self.cfg.epipolar, self.cfg.policy,
        )
        rec.refine_ms = 1e3 * (time.perf_counter() - t0)

        # ------------------------------------------------ keyframe or not
        if need_keyframe(result, self.cfg.policy):
            t0 = time.perf_counter()
            self._make_keyframe(frame_id, timestamp, pyramid, pose_cw, result.affine)
            activate_candidates(self.window, self.residuals, self.keyframes, self.cfg.policy)
            if len(self.window.keyframes) >= 2 and self.window.points:
                _, _, _ = optimize_window(self.window, self.residuals, self.cfg.optimizer)
            self._prune_dead_residuals()
            self._marginalize_frames()
            self._rebuild_tracking_ref()
            self._last_pose_cw = self.window.keyframes[-1].pose.copy()
            rec.map_ms = 1e3 * (time.perf_counter() - t0)
            rec.status = "keyframe"
            rec.pose_cw = self.window.keyframes[-1].pose.copy()

        self.records.append(rec)
        return rec

    def _finish_bootstrap(self, frame_id, ts, pyramid, got):
        rel, pixels, d = got
        f0_id, f0_ts, f0_pyr = self._first_frame
        kf0 = self._make_keyframe(f0_id, f0_ts, f0_pyr, SE3.identity(), AffineBrightness())
        kf1 = self._make_keyframe(frame_id, ts, pyramid, rel.copy(), AffineBrightness())
        # seed the window with the initializer's points, hosted in the first KF
        for pix, dd in zip(pixels, d):
            try:
                ap = make_active_point(self.window, kf0.kf_id, pix, float(dd), sigma_d=0.2 * dd)
            except ValueError:
                continue
            self.window.points.append(ap)
            self.residuals.append(PhotoResidual(host=kf0.kf_id, target=kf1.kf_id, point=ap.uid))
        optimize_window(self.window, self.residuals, self.cfg.optimizer, max_iters=10)
        self._prune_dead_residuals()
        self._rebuild_tracking_ref()
        self.initialized = True
        self._last_pose_cw = self.window.keyframes[-1].pose.copy()
        self._motion = SE3.identity()

    def _prune_dead_residuals(self):
        self.residuals = [r for r in self.residuals if r.state is ResidualState.ACTIVE]
        with_res = {r.point for r in self.residuals}
        self.window.points = [p for p in self.window.points if p.uid in with_res]

    # ------------------------------------------------------------- output
    def keyframe_trajectory(self) -> Trajectory:
        """Camera-to-world keyframe poses (marginalized + current window)."""
        rows = list(self.archived)
        for k in self.window.keyframes:
            rows.append((k.timestamp, k.pose.copy(), k.kf_id))
        rows.sort(key=lambda r: r[0])
        return Trajectory(
            np.array([r[0] for r in rows]), [r[1].inverse() for r in rows]
        )

    def run(self, frames) -> Trajectory:
        """Process an iterable of ``(frame_id, timestamp, Image)``."""
        for frame_id, ts, image in frames:
            self.process_frame(frame_id, ts, image)
        return self.keyframe_trajectory()
