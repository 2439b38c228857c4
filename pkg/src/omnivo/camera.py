"""Camera models: pinhole, unified omnidirectional, radial-tangential distortion.

The unified model projects through a camera-centered unit sphere whose center
is offset from the projection center by ``xi`` along the optical axis; for
``xi = 0`` it reduces exactly to the pinhole model, and for ``xi >= 1`` rays
with negative z remain projectable, covering fields of view above 180 degrees.

All projection functions are pure and vectorized: point arguments may be
``(3,)`` or ``(N, 3)``, pixel arguments ``(2,)`` or ``(N, 2)``. Data-dependent
failures (behind the projection center, outside the modelable image region)
come back as a boolean validity mask; precondition violations (``d <= 0``)
raise ``ValueError``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# denominator guard: projection blows up exactly at the FoV limit
DENOM_EPS = 1e-8


@dataclass(frozen=True)
class PinholeParams:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class UnifiedOmniParams:
    fx: float
    fy: float
    cx: float
    cy: float
    xi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.xi])

    @staticmethod
    def from_array(v) -> "UnifiedOmniParams":
        return UnifiedOmniParams(*(float(x) for x in v))


@dataclass(frozen=True)
class RadTanParams:
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def is_zero(self) -> bool:
        return self.k1 == 0.0 and self.k2 == 0.0 and self.p1 == 0.0 and self.p2 == 0.0


class CalibrationError(Exception):
    pass


def _ensure_points(x):
    x = np.asarray(x, float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def pinhole_project(x, p: PinholeParams):
    """Project points; valid only for z > 0 (in front of the image plane)."""
    pts, single = _ensure_points(x)
    z = pts[:, 2]
    valid = z > DENOM_EPS
    zs = np.where(valid, z, 1.0)
    uv = np.stack([p.fx * pts[:, 0] / zs + p.cx, p.fy * pts[:, 1] / zs + p.cy], axis=-1)
    if single:
        return uv[0], bool(valid[0])
    return uv, valid


def omni_project(x, p: UnifiedOmniParams):
    """Unified-model projection: ``[fx x, fy y] / (z + |x| xi) + c``.

    Scale-invariant in the point (any positive multiple projects identically),
    which the epipolar search relies on.
    """
    pts, single = _ensure_points(x)
    rho = np.linalg.norm(pts, axis=-1)
    denom = pts[:, 2] + rho * p.xi
    valid = denom > DENOM_EPS
    ds = np.where(valid, denom, 1.0)
    uv = np.stack([p.fx * pts[:, 0] / ds + p.cx, p.fy * pts[:, 1] / ds + p.cy], axis=-1)
    if single:
        return uv[0], bool(valid[0])
    return uv, valid


def omni_unproject_ray(u, p: UnifiedOmniParams):
    """Unit-norm viewing ray for pixel(s) `u`; valid where the model covers them.

    The returned ray always satisfies the projection precondition
    (``z + |x| xi = eta > 0``), so valid unprojections re-project.
    """
    uv, single = _ensure_points(u)
    ut = (uv[:, 0] - p.cx) / p.fx
    vt = (uv[:, 1] - p.cy) / p.fy
    r2 = ut * ut + vt * vt
    disc = 1.0 + (1.0 - p.xi * p.xi) * r2
    valid = disc >= 0.0
    eta = (p.xi + np.sqrt(np.where(valid, disc, 0.0))) / (r2 + 1.0)
    ray = np.stack([eta * ut, eta * vt, eta - p.xi], axis=-1)
    if single:
        return ray[0], bool(valid[0])
    return ray, valid


def omni_unproject(u, d, p: UnifiedOmniParams):
    """Point at Euclidean distance ``1/d`` along the ray of pixel `u`."""
    d_arr = np.asarray(d, float)
    if np.any(d_arr <= 0):
        raise ValueError("inverse distance must be positive")
    ray, valid = omni_unproject_ray(u, p)
    if ray.ndim == 1:
        return ray / float(d_arr), valid
    return ray / d_arr[:, None], valid


def omni_project_jacobian(x, p: UnifiedOmniParams):
    """Analytic ``d(pixel)/d(point)``, shape (2, 3) or (N, 2, 3)."""
    pts, single = _ensure_points(x)
    rho = np.linalg.norm(pts, axis=-1)
    D = pts[:, 2] + rho * p.xi
    safe_rho = np.maximum(rho, 1e-300)
    dD = np.stack(
        [p.xi * pts[:, 0] / safe_rho, p.xi * pts[:, 1] / safe_rho, 1.0 + p.xi * pts[:, 2] / safe_rho],
        axis=-1,
    )
    D2 = D * D
    J = np.empty((len(pts), 2, 3))
    J[:, 0, :] = -p.fx * pts[:, 0:1] * dD / D2[:, None]
    J[:, 1, :] = -p.fy * pts[:, 1:2] * dD / D2[:, None]
    J[:, 0, 0] += p.fx / D
    J[:, 1, 1] += p.fy / D
    return J[0] if single else J


def omni_project_jacobian_params(x, p: UnifiedOmniParams):
    """Analytic ``d(pixel)/d(fx, fy, cx, cy, xi)``, shape (2, 5) or (N, 2, 5)."""
    pts, single = _ensure_points(x)
    rho = np.linalg.norm(pts, axis=-1)
    D = pts[:, 2] + rho * p.xi
    J = np.zeros((len(pts), 2, 5))
    J[:, 0, 0] = pts[:, 0] / D
    J[:, 1, 1] = pts[:, 1] / D
    J[:, 0, 2] = 1.0
    J[:, 1, 3] = 1.0
    J[:, 0, 4] = -p.fx * pts[:, 0] * rho / (D * D)
    J[:, 1, 4] = -p.fy * pts[:, 1] * rho / (D * D)
    return J[0] if single else J


def omni_unproject_ray_jacobian_params(u, p: UnifiedOmniParams):
    """Analytic ``d(ray)/d(fx, fy, cx, cy, xi)``, shape (3, 5) or (N, 3, 5)."""
    uv, single = _ensure_points(u)
    ut = (uv[:, 0] - p.cx) / p.fx
    vt = (uv[:, 1] - p.cy) / p.fy
    r2 = ut * ut + vt * vt
    s = np.sqrt(1.0 + (1.0 - p.xi * p.xi) * r2)
    eta = (p.xi + s) / (r2 + 1.0)

    deta_dr2 = ((1.0 - p.xi * p.xi) / (2.0 * s) * (r2 + 1.0) - (p.xi + s)) / (r2 + 1.0) ** 2
    # ray = [eta*ut, eta*vt, eta - xi]; chain through (ut, vt)
    deta_dut = deta_dr2 * 2.0 * ut
    deta_dvt = deta_dr2 * 2.0 * vt
    dray_dut = np.stack([eta + ut * deta_dut, vt * deta_dut, deta_dut], axis=-1)
    dray_dvt = np.stack([ut * deta_dvt, eta + vt * deta_dvt, deta_dvt], axis=-1)

    dut = np.zeros((len(uv), 5))
    dvt = np.zeros((len(uv), 5))
    dut[:, 0] = -ut / p.fx
    dut[:, 2] = -1.0 / p.fx
    dvt[:, 1] = -vt / p.fy
    dvt[:, 3] = -1.0 / p.fy

    J = dray_dut[:, :, None] * dut[:, None, :] + dray_dvt[:, :, None] * dvt[:, None, :]
    # direct xi dependence
    deta_dxi = (1.0 - p.xi * r2 / s) / (r2 + 1.0)
    J[:, 0, 4] += ut * deta_dxi
    J[:, 1, 4] += vt * deta_dxi
    J[:, 2, 4] += deta_dxi - 1.0
    return J[0] if single else J


def radtan_distort(m, rt: RadTanParams):
    """Forward distortion on normalized plane coordinates (ideal -> distorted)."""
    mm, single = _ensure_points(m)
    mx, my = mm[:, 0], mm[:, 1]
    r2 = mx * mx + my * my
    radial = 1.0 + rt.k1 * r2 + rt.k2 * r2 * r2
    dx = mx * radial + 2.0 * rt.p1 * mx * my + rt.p2 * (r2 + 2.0 * mx * mx)
    dy = my * radial + rt.p1 * (r2 + 2.0 * my * my) + 2.0 * rt.p2 * mx * my
    out = np.stack([dx, dy], axis=-1)
    return out[0] if single else out


def radtan_undistort(m_d, rt: RadTanParams, max_iters: int = 20, tol: float = 1e-12):
    """Invert :func:`radtan_distort` by fixed-point iteration.

    Returns ``(m, iterations)`` where `iterations` is the count until the
    update fell below `tol` (or `max_iters`).
    """
    md, single = _ensure_points(m_d)
    m = md.copy()
    iters = 0
    for iters in range(1, max_iters + 1):
        mx, my = m[:, 0], m[:, 1]
        r2 = mx * mx + my * my
        radial = 1.0 + rt.k1 * r2 + rt.k2 * r2 * r2
        tang_x = 2.0 * rt.p1 * mx * my + rt.p2 * (r2 + 2.0 * mx * mx)
        tang_y = rt.p1 * (r2 + 2.0 * my * my) + 2.0 * rt.p2 * mx * my
        m_new = np.stack([(md[:, 0] - tang_x) / radial, (md[:, 1] - tang_y) / radial], axis=-1)
        delta = np.max(np.abs(m_new - m))
        m = m_new
        if delta < tol:
            break
    return (m[0] if single else m), iters


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics plus image geometry. ``xi = 0`` behaves as a pinhole camera."""

    params: UnifiedOmniParams
    width: int
    height: int
    radtan: RadTanParams | None = None

    @property
    def fx(self):
        return self.params.fx

    @property
    def fy(self):
        return self.params.fy

    @property
    def cx(self):
        return self.params.cx

    @property
    def cy(self):
        return self.params.cy

    @property
    def xi(self):
        return self.params.xi

    def with_params(self, params: UnifiedOmniParams) -> "CameraModel":
        return replace(self, params=params)

    def scaled(self, level: int) -> "CameraModel":
        """Intrinsics for pyramid level `level` (focal and center halve per level)."""
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(level):
            fx, fy = fx * 0.5, fy * 0.5
            cx = (cx + 0.5) * 0.5 - 0.5
            cy = (cy + 0.5) * 0.5 - 0.5
            w, h = w // 2, h // 2
        return CameraModel(UnifiedOmniParams(fx, fy, cx, cy, self.xi), w, h, self.radtan)

    def in_image(self, uv, margin: float = 0.0):
        arr = np.asarray(uv, float)
        single = arr.ndim == 1
        uv2 = np.atleast_2d(arr)
        ok = (
            (uv2[:, 0] >= margin)
            & (uv2[:, 0] <= self.width - 1 - margin)
            & (uv2[:, 1] >= margin)
            & (uv2[:, 1] <= self.height - 1 - margin)
        )
        return bool(ok[0]) if single else ok


def is_in_fov(x, model: CameraModel, margin: float = 4.0):
    """True where the projection precondition holds and the pixel stays inside
    the image with `margin` (residual-pattern radius plus 2 px by default)."""
    pts, single = _ensure_points(x)
    uv, valid = omni_project(pts, model.params)
    inside = (
        (uv[:, 0] >= margin)
        & (uv[:, 0] <= model.width - 1 - margin)
        & (uv[:, 1] >= margin)
        & (uv[:, 1] <= model.height - 1 - margin)
    )
    ok = valid & inside
    return bool(ok[0]) if single else ok


def omni_fx_for_fov(fov_deg: float, width: int, xi: float) -> float:
    """Focal length so the given diagonal-free FoV maps onto the image half-width."""
    theta = np.deg2rad(fov_deg) * 0.5
    r = np.sin(theta) / (np.cos(theta) + xi)
    if r <= 0:
        raise ValueError(f"FoV {fov_deg} deg not representable with xi={xi}")
    return (width / 2.0) / r


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) array of integer pixel coordinates in row-major order."""
    uu, vv = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def build_undistort_map(model: CameraModel):
    """Per-pixel sampling locations in the raw image removing rad-tan distortion.

    For each output pixel the ideal normalized coordinates pass through the
    forward distortion (exact, closed form) and back to raw pixels. Returns
    ``(map_uv (H, W, 2), valid (H, W))``; invalid entries sample outside the
    raw image.
    """
    rt = model.radtan or RadTanParams()
    p = model.params
    grid = pixel_grid(model.width, model.height)
    m = np.stack([(grid[:, 0] - p.cx) / p.fx, (grid[:, 1] - p.cy) / p.fy], axis=-1)
    md = radtan_distort(m, rt)
    raw = np.stack([md[:, 0] * p.fx + p.cx, md[:, 1] * p.fy + p.cy], axis=-1)
    valid = (
        (raw[:, 0] >= 0)
        & (raw[:, 0] <= model.width - 1)
        & (raw[:, 1] >= 0)
        & (raw[:, 1] <= model.height - 1)
    )
    H, W = model.height, model.width
    return raw.reshape(H, W, 2), valid.reshape(H, W)


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    du = u - u0
    dv = v - v0
    u0 = np.clip(u0, 0, img.shape[1] - 2)
    v0 = np.clip(v0, 0, img.shape[0] - 2)
    return (
        img[v0, u0] * (1 - du) * (1 - dv)
        + img[v0, u0 + 1] * du * (1 - dv)
        + img[v0 + 1, u0] * (1 - du) * dv
        + img[v0 + 1, u0 + 1] * du * dv
    )


def undistort_image(raw: np.ndarray, model: CameraModel):
    """Resample a raw image so only the unified model remains.

    Uses the precomputed remap from :func:`build_undistort_map`. Returns
    ``(undistorted, valid)``; pixels whose source lies outside the raw image
    are zeroed and flagged invalid. With all-zero coefficients the output
    equals the input.
    """
    raw = np.asarray(raw, float)
    if raw.shape != (model.height, model.width):
        raise ValueError(f"image shape {raw.shape} does not match calibration")
    if model.radtan is None or model.radtan.is_zero():
        return raw.copy(), np.ones_like(raw, bool)
    map_uv, valid = build_undistort_map(model)
    out = _bilinear(raw, map_uv[..., 0], map_uv[..., 1])
    out[~valid] = 0.0
    return out, valid


def load_calibration(path) -> CameraModel:
    """Parse the plain-text calibration format.

    Line 1: ``model omni|pinhole``; line 2: ``fx fy cx cy [xi]``;
    line 3 (optional): ``k1 k2 p1 p2``; last line: ``width height``.
    """
    with open(path, "r") as f:
        lines = [ln.strip() for ln in f.readlines()]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln and not ln.startswith("#")]
    if len(lines) < 3:
        raise CalibrationError(f"{path}: expected at least 3 non-empty lines")

    ln, header = lines[0]
    parts = header.split()
    if len(parts) != 2 or parts[0] != "model" or parts[1] not in ("omni", "pinhole"):
        raise CalibrationError(f"{path}:{ln}: expected 'model omni|pinhole', got '{header}'")
    model_kind = parts[1]

    ln, intr = lines[1]
    vals = intr.split()
    if model_kind == "omni" and len(vals) != 5:
        raise CalibrationError(f"{path}:{ln}: omni model needs 'fx fy cx cy xi'")
    if model_kind == "pinhole" and len(vals) not in (4, 5):
        raise CalibrationError(f"{path}:{ln}: pinhole model needs 'fx fy cx cy'")
    try:
        nums = [float(v) for v in vals]
    except ValueError:
        raise CalibrationError(f"{path}:{ln}: non-numeric intrinsics") from None
    xi = nums[4] if len(nums) == 5 else 0.0
    if model_kind == "pinhole":
        xi = 0.0
    if xi < 0:
        raise CalibrationError(f"{path}:{ln}: xi must be >= 0")
    if nums[0] <= 0 or nums[1] <= 0:
        raise CalibrationError(f"{path}:{ln}: focal lengths must be positive")

    radtan = None
    if len(lines) == 4:
        ln, dist = lines[2]
        dvals = dist.split()
        if len(dvals) != 4:
            raise CalibrationError(f"{path}:{ln}: distortion line needs 'k1 k2 p1 p2'")
        try:
            radtan = RadTanParams(*(float(v) for v in dvals))
        except ValueError:
            raise CalibrationError(f"{path}:{ln}: non-numeric distortion") from None

    ln, size = lines[-1]
    svals = size.split()
    if len(svals) != 2:
        raise CalibrationError(f"{path}:{ln}: size line needs 'width height'")
    try:
        w, h = int(svals[0]), int(svals[1])
    except ValueError:
        raise CalibrationError(f"{path}:{ln}: non-integer image size") from None
    if not (0 < nums[2] < w and 0 < nums[3] < h):
        raise CalibrationError(f"{path}:{ln}: principal point outside image bounds")
    return CameraModel(UnifiedOmniParams(nums[0], nums[1], nums[2], nums[3], xi), w, h, radtan)


def save_calibration(path, model: CameraModel) -> None:
    kind = "omni" if model.xi != 0.0 else "pinhole"
    p = model.params
    with open(path, "w") as f:
        f.write(f"model {kind}\n")
        f.write(f"{p.fx:.9g} {p.fy:.9g} {p.cx:.9g} {p.cy:.9g} {p.xi:.9g}\n")
        if model.radtan is not None:
            rt = model.radtan
            f.write(f"{rt.k1:.9g} {rt.k2:.9g} {rt.p1:.9g} {rt.p2:.9g}\n")
        f.write(f"{model.width} {model.height}\n")
