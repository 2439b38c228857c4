"""Inverse-distance estimation along the epipolar curve.

Under the unified omnidirectional model, the search interval of a host
pixel's ray maps to a chord between two points on the target camera's unit
sphere; projecting the chord yields a conic curve rather than a line. The
search walks that curve in roughly 1-pixel arc-length steps (the parameter
increment is the inverse Jacobian norm, re-derived locally), scores the
affine-corrected residual pattern by SSD, then refines sub-step by a
quadratic fit plus a few 1-D Gauss-Newton iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, omni_project, omni_project_jacobian, omni_unproject_ray
from .geometry import SE3
from .image import Image, interp


@dataclass(frozen=True)
class EpipolarConfig:
    step_px: float = 0.7
    ambiguity_ratio: float = 0.85  # best/second-best SSD above this -> ambiguous
    ambiguity_min_sep_px: float = 5.0
    min_grad: float = 4.0  # mean host-pattern gradient magnitude to bother searching
    sigma_photo: float = 3.0  # assumed intensity noise, drives sigma_d
    gn_iters: int = 3
    max_steps: int = 3000
    n_probes: int = 33
    d_cap: float = 100.0  # finite stand-in for the "zero to infinity" interval


@dataclass
class EpiSegment:
    host_pixel: np.ndarray
    host_ray: np.ndarray  # unit ray in the host frame
    rel: SE3  # host -> target
    p0: np.ndarray  # unit sphere point at d_min (far end of the interval)
    p_inf: np.ndarray  # unit sphere point at d_max (near end)
    d_min: float
    d_max: float
    degenerate: bool = False
    truncated: bool = False


@dataclass
class MatchResult:
    status: str  # found | ambiguous | out_of_bounds | low_gradient | degenerate
    alpha: float = 0.0
    pixel: np.ndarray | None = None
    d_refined: float = 0.0
    sigma_d: float = 0.0
    d_lo: float = 0.0
    d_hi: float = 0.0
    second_best_ratio: float = 0.0
    n_steps: int = 0


def _sphere_point(ray: np.ndarray, d: float, rel: SE3) -> np.ndarray:
    """pi_s(R pi^-1(p, d) + t) with the d -> 0 limit handled exactly."""
    if d < 1e-12:
        v = rel.R @ ray
    else:
        v = rel.R @ (ray / d) + rel.t
    return v / np.linalg.norm(v)


def make_segment(
    pixel: np.ndarray,
    rel: SE3,
    d_min: float,
    d_max: float,
    cam: CameraModel,
) -> EpiSegment:
    """Build the unit-sphere chord for a host pixel's search interval.

    Zero baseline gives a degenerate segment (no parallax; the caller must
    skip the update). Intervals subtending more than 90 degrees on the
    sphere are truncated at the far end so the chord stays well-conditioned.
    """
    if not 0 <= d_min < d_max:
        raise ValueError(f"invalid inverse-distance interval [{d_min}, {d_max}]")
    ray, ok = omni_unproject_ray(np.asarray(pixel, float), cam.params)
    if not ok:
        raise ValueError(f"host pixel {pixel} outside the model's valid region")
    p_inf = _sphere_point(ray, d_max, rel)
    baseline = float(np.linalg.norm(rel.t))
    if baseline < 1e-9:
        p0 = _sphere_point(ray, d_min, rel)
        return EpiSegment(np.asarray(pixel, float), ray, rel, p0, p_inf, d_min, d_max, True)

    truncated = False
    p0 = _sphere_point(ray, d_min, rel)
    hi = d_max
    if float(p0 @ p_inf) < 0.05:
        # clip the near (large-d) end until the chord subtends < 90 degrees;
        # the far end holds the plausible matches for wide initial intervals
        truncated = True
        lo = d_min
        for _ in range(25):
            mid = 0.5 * (lo + hi)
            if float(p0 @ _sphere_point(ray, mid, rel)) < 0.05:
                hi = mid
            else:
                lo = mid
        hi = lo
        p_inf = _sphere_point(ray, hi, rel)

    degenerate = float(np.linalg.norm(p0 - p_inf)) < 1e-9
    return EpiSegment(
        np.asarray(pixel, float), ray, rel, p0, p_inf, d_min, hi, degenerate, truncated
    )


def curve_point(seg: EpiSegment, alpha, cam: CameraModel):
    """Project the chord interpolant; alpha=0 is the near (d_max) end."""
    a = np.asarray(alpha, float)
    p = np.multiply.outer(a, seg.p0) + np.multiply.outer(1.0 - a, seg.p_inf)
    return omni_project(p, cam.params)


def _curve_jacobian(seg: EpiSegment, alpha, cam: CameraModel):
    a = np.atleast_1d(np.asarray(alpha, float))
    p = np.multiply.outer(a, seg.p0) + np.multiply.outer(1.0 - a, seg.p_inf)
    Jp = omni_project_jacobian(p, cam.params)
    return Jp @ (seg.p0 - seg.p_inf)


def alpha_step(seg: EpiSegment, alpha: float, cam: CameraModel) -> float:
    """Parameter increment advancing the curve by about one pixel."""
    J = _curve_jacobian(seg, alpha, cam)[0]
    n = float(np.linalg.norm(J))
    if n < 1e-12:
        return 0.01  # stationary point of the curve; crawl past it
    return 1.0 / n


def walk_alphas(seg: EpiSegment, cam: CameraModel, max_steps: int = 100_000) -> np.ndarray:
    """Sequential alpha samples from 0 to 1, re-deriving the step each time."""
    alphas = [0.0]
    a = 0.0
    for _ in range(max_steps):
        a = a + alpha_step(seg, a, cam)
        if a >= 1.0:
            break
        alphas.append(a)
    alphas.append(1.0)
    return np.array(alphas)


def sample_alphas(seg: EpiSegment, cam: CameraModel, cfg: EpipolarConfig):
    """Alpha samples spaced `cfg.step_px` of arc length apart.

    Integrates the local speed ``|J(alpha)|`` over a probe grid and inverts
    the cumulative arc length; equivalent to sequential stepping but
    vectorizable. Returns ``(alphas, arc_px)``.
    """
    probes = np.linspace(0.0, 1.0, cfg.n_probes)
    speeds = np.linalg.norm(_curve_jacobian(seg, probes, cam), axis=-1)
    mids = 0.5 * (speeds[1:] + speeds[:-1])
    arc = np.concatenate([[0.0], np.cumsum(mids * np.diff(probes))])
    total = arc[-1]
    n = int(min(max(math.ceil(total / cfg.step_px), 2), cfg.max_steps))
    targets = np.linspace(0.0, total, n + 1)
    alphas = np.interp(targets, arc, probes)
    return alphas, targets


def alpha_to_inverse_distance(seg: EpiSegment, alpha: float):
    """Inverse distance along the host ray whose target-sphere direction is
    the chord point, via closest-point triangulation of the two rays."""
    d_h = seg.rel.R @ seg.host_ray
    p = alpha * seg.p0 + (1.0 - alpha) * seg.p_inf
    w = p / np.linalg.norm(p)
    c = float(d_h @ w)
    denom = 1.0 - c * c
    if denom < 1e-12:
        return None
    t = seg.rel.t
    lam = (c * float(w @ t) - float(d_h @ t)) / denom
    if lam <= 1e-9:
        return None
    return 1.0 / lam


def _pattern_interp(img: Image, uv: np.ndarray, offsets: np.ndarray):
    """Interpolate intensities (and gradients) at uv + offsets; (N, K) arrays."""
    pts = uv[:, None, :] + offsets[None, :, :]
    flat = pts.reshape(-1, 2)
    inten, gx, gy, ok = interp(img, flat)
    K = len(offsets)
    return (
        inten.reshape(-1, K),
        gx.reshape(-1, K),
        gy.reshape(-1, K),
        ok.reshape(-1, K).all(axis=1),
    )


def refine_batch(
    pixels: np.ndarray,
    d: np.ndarray,
    host_img: Image,
    target_img: Image,
    rel: SE3,
    cam: CameraModel,
    offsets: np.ndarray,
    affine_host=(0.0, 0.0),
    affine_target=(0.0, 0.0),
    cfg: EpipolarConfig = EpipolarConfig(),
    iters: int = 4,
):
    """Vectorized distance polish for candidates with tight intervals.

    Runs the warped-pattern Gauss-Newton of :func:`search` jointly over N
    candidates (no curve sampling, no ambiguity logic, which a tight prior
    has already settled). Returns ``(d, sigma_d, rms, valid)``.
    """
    pixels = np.atleast_2d(pixels)
    d = np.array(d, float)
    N, K = len(pixels), len(offsets)
    a_h, b_h = affine_host
    a_t, b_t = affine_target
    scale = (target_img.exposure_t / host_img.exposure_t) * math.exp(a_t - a_h)

    pat = pixels[:, None, :] + offsets[None, :, :]
    h_int, _, _, h_ok = interp(host_img, pat.reshape(-1, 2))
    ref = scale * (h_int.reshape(N, K) - b_h)
    rays, r_ok = omni_unproject_ray(pat.reshape(-1, 2), cam.params)
    rot = (rays @ rel.R.T).reshape(N, K, 3)
    valid = h_ok.reshape(N, K).all(axis=1) & r_ok.reshape(N, K).all(axis=1)

    curv = np.zeros(N)
    rms = np.full(N, np.inf)
    for _ in range(iters):
        x_t = rot / d[:, None, None] + rel.t
        uv, ok_p = omni_project(x_t.reshape(-1, 3), cam.params)
        v, gx, gy, ok_i = interp(target_img, uv)
        ok = valid & ok_p.reshape(N, K).all(axis=1) & ok_i.reshape(N, K).all(axis=1)
        Jpi = omni_project_jacobian(x_t.reshape(-1, 3), cam.params).reshape(N, K, 2, 3)
        dxdd = -rot / (d * d)[:, None, None]
        J = gx.reshape(N, K) * np.einsum("nkd,nkd->nk", Jpi[:, :, 0, :], dxdd) + gy.reshape(
            N, K
        ) * np.einsum("nkd,nkd->nk", Jpi[:, :, 1, :], dxdd)
        r = (v.reshape(N, K) - b_t) - ref
        JTJ = np.einsum("nk,nk->n", J, J)
        step_ok = ok & (JTJ > 1e-12)
        delta = np.where(step_ok, -np.einsum("nk,nk->n", J, r) / np.maximum(JTJ, 1e-12), 0.0)
        delta = np.clip(delta, -0.25 * d, 0.25 * d)
        d = np.where(step_ok, np.maximum(d + delta, 1e-6), d)
        curv = np.where(step_ok, JTJ, curv)
        rms = np.where(ok, np.sqrt(np.mean(r * r, axis=1)), rms)
        valid = valid & ok
    sigma = np.where(curv > 0, cfg.sigma_photo / np.sqrt(np.maximum(curv, 1e-12)), 0.1 * d)
    return d, sigma, rms, valid


def search(
    seg: EpiSegment,
    host_img: Image,
    target_img: Image,
    offsets: np.ndarray,
    cam: CameraModel,
    affine_host=(0.0, 0.0),
    affine_target=(0.0, 0.0),
    cfg: EpipolarConfig = EpipolarConfig(),
) -> MatchResult:
    """Locate the host pattern along the epipolar curve.

    Minimizes the SSD of the affine-brightness-corrected residual over the
    sampled curve, rejects ambiguous double minima (best/second-best ratio
    above ``cfg.ambiguity_ratio`` at a distinct location), refines the best
    sample sub-step, and converts to an inverse distance plus a +-2 sigma
    interval for the next search.
    """
    if seg.degenerate:
        return MatchResult(status="degenerate")

    host_vals, hgx, hgy, h_ok = _pattern_interp(host_img, seg.host_pixel[None, :], offsets)
    if not h_ok[0]:
        return MatchResult(status="out_of_bounds")
    grad_mag = float(np.hypot(hgx, hgy).mean())
    if grad_mag < cfg.min_grad:
        return MatchResult(status="low_gradient")

    a_h, b_h = affine_host
    a_t, b_t = affine_target
    scale = (target_img.exposure_t * math.exp(a_t)) / (host_img.exposure_t * math.exp(a_h))
    ref = scale * (host_vals[0] - b_h)

    alphas, arcs = sample_alphas(seg, cam, cfg)
    uv, proj_ok = curve_point(seg, alphas, cam)
    vals, _, _, samp_ok = _pattern_interp(target_img, uv, offsets)
    ok = proj_ok & samp_ok
    if not np.any(ok):
        return MatchResult(status="out_of_bounds", n_steps=len(alphas))

    resid = (vals - b_t) - ref[None, :]
    ssd = np.where(ok, np.sum(resid * resid, axis=1), np.inf)
    best = int(np.argmin(ssd))

    far = np.abs(arcs - arcs[best]) > cfg.ambiguity_min_sep_px
    ratio = 0.0
    if np.any(far & ok):
        second = float(np.min(ssd[far & ok]))
        # noise floor keeps the ratio meaningful when both minima are ~exact
        eps = len(offsets) * cfg.sigma_photo**2
        ratio = float((ssd[best] + eps) / (second + eps))
        if ratio > cfg.ambiguity_ratio:
            return MatchResult(status="ambiguous", second_best_ratio=ratio, n_steps=len(alphas))

    # quadratic sub-step fit over the best sample and its neighbours
    a_best = alphas[best]
    if 0 < best < len(alphas) - 1 and ok[best - 1] and ok[best + 1]:
        y0, y1, y2 = ssd[best - 1], ssd[best], ssd[best + 1]
        x0, x1, x2 = alphas[best - 1], alphas[best], alphas[best + 1]
        denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
        if abs(denom) > 0:
            a_coef = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
            b_coef = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
            if a_coef > 0:
                a_fit = -b_coef / (2 * a_coef)
                if x0 <= a_fit <= x2:
                    a_best = a_fit

    d_seed = alpha_to_inverse_distance(seg, a_best)
    if d_seed is None:
        return MatchResult(status="out_of_bounds", n_steps=len(alphas))
    d_lo_lim = seg.d_min if seg.d_min > 0 else 1e-6
    d_ref = float(np.clip(d_seed, d_lo_lim, seg.d_max))

    # Gauss-Newton on the inverse distance with the properly warped pattern:
    # every pattern pixel reprojects at the candidate distance, matching the
    # photometric model of the window optimization (removes the rigid-pattern
    # localization bias of the coarse SSD sweep).
    rays, rays_ok = omni_unproject_ray(seg.host_pixel[None, :] + offsets, cam.params)
    if not np.all(rays_ok):
        return MatchResult(status="out_of_bounds", n_steps=len(alphas))
    R, t = seg.rel.R, seg.rel.t
    rot_rays = rays @ R.T
    curvature = 0.0
    for _ in range(cfg.gn_iters):
        x_t = rot_rays / d_ref + t
        uv_k, ok_p = omni_project(x_t, cam.params)
        if not np.all(ok_p):
            break
        v1, g1x, g1y, ok_i = interp(target_img, uv_k)
        if not np.all(ok_i):
            break
        Jpi = omni_project_jacobian(x_t, cam.params)
        dx_dd = -rot_rays / (d_ref * d_ref)
        J = g1x * np.einsum("kd,kd->k", Jpi[:, 0, :], dx_dd) + g1y * np.einsum(
            "kd,kd->k", Jpi[:, 1, :], dx_dd
        )
        r = (v1 - b_t) - ref
        JTJ = float(J @ J)
        if JTJ < 1e-12:
            break
        curvature = JTJ
        delta = -float(J @ r) / JTJ
        max_step = 0.25 * d_ref
        delta = max(-max_step, min(max_step, delta))
        d_new = d_ref + delta
        if not d_lo_lim <= d_new <= seg.d_max:
            d_ref = float(np.clip(d_new, d_lo_lim, seg.d_max))
            break
        d_ref = d_new
        if abs(delta) < 1e-7 * d_ref:
            break

    if curvature > 0:
        sigma_d = max(cfg.sigma_photo / math.sqrt(curvature), 1e-6)
    else:
        sigma_d = max(0.1 * d_ref, 1e-6)

    uv_best, ok_b = omni_project(seg.rel.act(seg.host_ray / d_ref), cam.params)
    if not ok_b:
        return MatchResult(status="out_of_bounds", n_steps=len(alphas))
    d_lo = max(d_ref - 2.0 * sigma_d, 1e-6)
    d_hi = min(d_ref + 2.0 * sigma_d, cfg.d_cap)
    return MatchResult(
        status="found",
        alpha=float(a_best),
        pixel=uv_best,
        d_refined=float(d_ref),
        sigma_d=float(sigma_d),
        d_lo=float(d_lo),
        d_hi=float(d_hi),
        second_best_ratio=ratio,
        n_steps=len(alphas),
    )
