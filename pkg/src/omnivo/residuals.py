"""Photometric residuals: pattern SSD with Huber + gradient weighting,
affine brightness compensation, and analytic Jacobians.

A residual couples one hosted point to one target keyframe. All eight
pattern pixels share the point's inverse distance (fronto-parallel patch);
per pixel the term is::

    r_k = (I_t[p'_k] - b_t) - (t_t e^{a_t}) / (t_h e^{a_h}) * (I_h[p_k] - b_h)

with p'_k the reprojection through the relative pose and the unified
camera model. Energies use the Huber norm (quadratic below gamma, linear
above) times a gradient-dependent down-weighting of high-gradient pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .camera import (
    CameraModel,
    omni_project,
    omni_project_jacobian,
    omni_project_jacobian_params,
    omni_unproject_ray,
    omni_unproject_ray_jacobian_params,
)
from .geometry import SE3, relative_pose, skew
from .image import Image, interp

# spread-out 8-pixel neighbourhood, (du, dv) around the point
PATTERN_OFFSETS = np.array(
    [(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1)], dtype=float
)
PATTERN_RADIUS = 2.0


@dataclass(frozen=True)
class ResidualPattern:
    offsets: np.ndarray = field(default_factory=lambda: PATTERN_OFFSETS.copy())

    @property
    def radius(self) -> float:
        return float(np.max(np.abs(self.offsets)))


@dataclass
class AffineBrightness:
    a: float = 0.0
    b: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b])


@dataclass(frozen=True)
class ResidualConfig:
    gamma: float = 9.0  # Huber knee in intensity units at pyramid level 0
    grad_weight_c: float = 50.0
    outlier_energy: float = 1152.0  # 8 pattern pixels * 12^2


class ResidualState(Enum):
    ACTIVE = "active"
    OOB = "oob"
    OUTLIER = "outlier"


@dataclass
class PhotoResidual:
    """One (point, target-frame) photometric term inside the window."""

    host: int  # keyframe index in the window
    target: int
    point: int  # index into the window's active point list
    state: ResidualState = ResidualState.ACTIVE
    r: np.ndarray | None = None
    w: np.ndarray | None = None
    energy: float = 0.0


def huber_weight(r, gamma: float):
    """IRLS weight of the Huber norm: 1 inside the knee, gamma/|r| outside."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    r_abs = np.abs(np.asarray(r, float))
    return np.where(r_abs <= gamma, 1.0, gamma / np.maximum(r_abs, 1e-300))


def huber_energy(r, gamma: float):
    """Huber norm: r^2 below the knee, linear growth above (C1 continuous)."""
    r_abs = np.abs(np.asarray(r, float))
    return np.where(r_abs <= gamma, r_abs * r_abs, gamma * (2.0 * r_abs - gamma))


def gradient_weight(gx, gy, c: float = 50.0):
    """w_p = c^2 / (c^2 + |grad I|^2); damps noise at strong gradients."""
    return c * c / (c * c + np.asarray(gx, float) ** 2 + np.asarray(gy, float) ** 2)


def exposure_scale(host_exposure, host_a, target_exposure, target_a) -> float:
    # exp of the difference: a common shift of both a's cancels exactly
    return (target_exposure / host_exposure) * math.exp(target_a - host_a)


@dataclass
class ResidualBatch:
    """Evaluation of N (point, target) terms sharing one (host, target) pair.

    Keeps every intermediate the Jacobians need so nothing is recomputed.
    """

    valid: np.ndarray  # (N,) all 8 pattern pixels interpolable and in FoV
    r: np.ndarray  # (N, 8)
    w_grad: np.ndarray  # (N, 8) host-gradient weights
    w_irls: np.ndarray  # (N, 8) gradient * Huber weights
    energy: np.ndarray  # (N,) gradient-weighted Huber energy
    scale: float  # brightness transfer factor
    host_vals: np.ndarray  # (N, 8)
    pattern_uv: np.ndarray  # (N, 8, 2) host pattern pixels
    rays: np.ndarray  # (N, 8, 3) host pattern rays
    x_target: np.ndarray  # (N, 8, 3)
    uv_target: np.ndarray  # (N, 8, 2)
    grad_target: np.ndarray  # (N, 8, 2)


def evaluate_batch(
    host_img: Image,
    target_img: Image,
    host_pose: SE3,
    target_pose: SE3,
    host_affine: AffineBrightness,
    target_affine: AffineBrightness,
    pixels: np.ndarray,
    inv_dist: np.ndarray,
    cam: CameraModel,
    cfg: ResidualConfig = ResidualConfig(),
    offsets: np.ndarray = PATTERN_OFFSETS,
    host_vals: np.ndarray | None = None,
    w_grad: np.ndarray | None = None,
) -> ResidualBatch:
    """Evaluate N pattern residuals from `host` into `target`.

    Poses are world-to-camera; the relative pose is ``T_t T_h^-1``. Cached
    `host_vals`/`w_grad` (from activation time) skip the host-side lookups.
    """
    pixels = np.atleast_2d(np.asarray(pixels, float))
    inv_dist = np.atleast_1d(np.asarray(inv_dist, float))
    N, K = len(pixels), len(offsets)
    rel = relative_pose(host_pose, target_pose)

    pattern_uv = pixels[:, None, :] + offsets[None, :, :]
    flat_uv = pattern_uv.reshape(-1, 2)
    if host_vals is None or w_grad is None:
        h_int, h_gx, h_gy, h_ok = interp(host_img, flat_uv)
        host_vals = h_int.reshape(N, K)
        w_grad = gradient_weight(h_gx, h_gy, cfg.grad_weight_c).reshape(N, K)
        host_ok = h_ok.reshape(N, K).all(axis=1)
    else:
        host_ok = np.ones(N, bool)

    rays, ray_ok = omni_unproject_ray(flat_uv, cam.params)
    rays = rays.reshape(N, K, 3)
    ray_ok = ray_ok.reshape(N, K).all(axis=1)

    x_t = rays / inv_dist[:, None, None] @ rel.R.T + rel.t
    uv_t, proj_ok = omni_project(x_t.reshape(-1, 3), cam.params)
    t_int, t_gx, t_gy, t_ok = interp(target_img, uv_t)
    proj_ok = proj_ok.reshape(N, K).all(axis=1)
    t_ok = t_ok.reshape(N, K).all(axis=1)
    valid = host_ok & ray_ok & proj_ok & t_ok

    s = exposure_scale(host_img.exposure_t, host_affine.a, target_img.exposure_t, target_affine.a)
    r = (t_int.reshape(N, K) - target_affine.b) - s * (host_vals - host_affine.b)
    r[~valid] = 0.0

    w_h = huber_weight(r, cfg.gamma)
    energy = np.sum(w_grad * huber_energy(r, cfg.gamma), axis=1)
    energy[~valid] = 0.0

    return ResidualBatch(
        valid=valid,
        r=r,
        w_grad=w_grad,
        w_irls=w_grad * w_h,
        energy=energy,
        scale=s,
        host_vals=host_vals,
        pattern_uv=pattern_uv,
        rays=rays,
        x_target=x_t,
        uv_target=uv_t.reshape(N, K, 2),
        grad_target=np.stack([t_gx.reshape(N, K), t_gy.reshape(N, K)], axis=-1),
    )


def evaluate(res: PhotoResidual, state, cfg: ResidualConfig | None = None):
    """Single-residual evaluation against a window state.

    Returns ``(energy, r, valid)`` and refreshes the residual's cached
    values/state. `state` needs ``kf(id)``, ``point(uid)``, ``cam``; the
    optimizer's window state satisfies this.
    """
    cfg = cfg or getattr(state, "rcfg", ResidualConfig())
    kf_h, kf_t = state.kf(res.host), state.kf(res.target)
    pt = state.point(res.point)
    ev = evaluate_batch(
        kf_h.image, kf_t.image, kf_h.pose, kf_t.pose, kf_h.affine, kf_t.affine,
        pt.pixel[None, :], np.array([pt.d]), state.cam, cfg,
        host_vals=pt.host_vals[None], w_grad=pt.w_grad[None],
    )
    res.r = ev.r[0]
    res.w = ev.w_irls[0]
    res.energy = float(ev.energy[0])
    if not ev.valid[0]:
        res.state = ResidualState.OOB
    elif res.energy > cfg.outlier_energy:
        res.state = ResidualState.OUTLIER
    return res.energy, ev.r[0], bool(ev.valid[0])


def jacobians(res: PhotoResidual, state, cfg: ResidualConfig | None = None):
    """Single-residual Jacobian blocks w.r.t. all optimized variables."""
    cfg = cfg or getattr(state, "rcfg", ResidualConfig())
    kf_h, kf_t = state.kf(res.host), state.kf(res.target)
    pt = state.point(res.point)
    ev = evaluate_batch(
        kf_h.image, kf_t.image, kf_h.pose, kf_t.pose, kf_h.affine, kf_t.affine,
        pt.pixel[None, :], np.array([pt.d]), state.cam, cfg,
        host_vals=pt.host_vals[None], w_grad=pt.w_grad[None],
    )
    J = jacobian_batch(
        ev, kf_h.pose, kf_t.pose, kf_h.affine, kf_t.affine,
        np.array([pt.d]), state.cam,
        kf_h.image.exposure_t, kf_t.image.exposure_t,
    )
    return {
        "d": J.d[0],
        "pose_host": J.pose_host[0],
        "pose_target": J.pose_target[0],
        "affine_host": J.affine_host[0],
        "affine_target": J.affine_target[0],
        "intrinsics": J.intrinsics[0],
    }


@dataclass
class JacobianBatch:
    d: np.ndarray  # (N, 8)
    pose_host: np.ndarray  # (N, 8, 6) twist order [omega, v]
    pose_target: np.ndarray  # (N, 8, 6)
    affine_host: np.ndarray  # (N, 8, 2) for (a_h, b_h)
    affine_target: np.ndarray  # (N, 8, 2)
    intrinsics: np.ndarray  # (N, 8, 5)


def jacobian_batch(
    ev: ResidualBatch,
    host_pose: SE3,
    target_pose: SE3,
    host_affine: AffineBrightness,
    target_affine: AffineBrightness,
    inv_dist: np.ndarray,
    cam: CameraModel,
    host_exposure: float,
    target_exposure: float,
) -> JacobianBatch:
    """Analytic derivatives of every residual w.r.t. all optimized variables.

    Pose/intrinsic arguments may be linearization points (first-estimate
    Jacobians); the residual values in `ev` always come from the current
    state. Pose perturbations are left-multiplicative twists on
    world-to-camera poses.
    """
    N, K = ev.r.shape
    inv_dist = np.atleast_1d(np.asarray(inv_dist, float))
    rel = relative_pose(host_pose, target_pose)
    R = rel.R

    x_h = ev.rays / inv_dist[:, None, None]  # (N, K, 3)
    x_t = x_h @ R.T + rel.t

    Jpi = omni_project_jacobian(x_t.reshape(-1, 3), cam.params).reshape(N, K, 2, 3)
    # image gradient chained through the projection: (N, K, 3)
    g_geo = np.einsum("nkc,nkcd->nkd", ev.grad_target, Jpi)

    # d: x_t = R ray / d + t  ->  dx_t/dd = -(R ray) / d^2
    dx_dd = -(ev.rays @ R.T) / (inv_dist**2)[:, None, None]
    J_d = np.einsum("nkd,nkd->nk", g_geo, dx_dd)

    # target pose: dx_t/d(delta) = [-skew(x_t) | I], so g^T(-skew(x_t)) = x_t x g
    J_pose_t = np.empty((N, K, 6))
    J_pose_t[..., :3] = np.cross(x_t, g_geo)
    J_pose_t[..., 3:] = g_geo

    # host pose: dx_t/d(delta) = R_rel [skew(x_h) | -I], so (gR)^T skew(x_h) = gR x x_h
    gR = g_geo @ R  # (N, K, 3)
    J_pose_h = np.empty((N, K, 6))
    J_pose_h[..., :3] = np.cross(gR, x_h)
    J_pose_h[..., 3:] = -gR

    s = exposure_scale(host_exposure, host_affine.a, target_exposure, target_affine.a)
    host_term = s * (ev.host_vals - host_affine.b)  # (N, K)
    J_aff_h = np.stack([host_term, np.full((N, K), s)], axis=-1)
    J_aff_t = np.stack([-host_term, np.full((N, K), -1.0)], axis=-1)

    # intrinsics enter twice: projecting x_t and unprojecting the host pattern
    Jpi_c = omni_project_jacobian_params(x_t.reshape(-1, 3), cam.params).reshape(N, K, 2, 5)
    J_ray_c = omni_unproject_ray_jacobian_params(
        ev.pattern_uv.reshape(-1, 2), cam.params
    ).reshape(N, K, 3, 5)
    dx_dc = np.einsum("de,nkep->nkdp", R, J_ray_c) / inv_dist[:, None, None, None]
    du_dc = Jpi_c + np.einsum("nkcd,nkdp->nkcp", Jpi, dx_dc)
    J_intr = np.einsum("nkc,nkcp->nkp", ev.grad_target, du_dc)
    return JacobianBatch(
        d=J_d,
        pose_host=J_pose_h,
        pose_target=J_pose_t,
        affine_host=J_aff_h,
        affine_target=J_aff_t,
        intrinsics=J_intr,
    )
