"""Deterministic synthetic fisheye scenes and dataset I/O.

The renderer ray-casts the interior of a textured axis-aligned box room
(plus optional spheres) through any unified-model camera, including FoV
above 180 degrees, and emits exact ground truth: per-pixel inverse
distance maps and camera-to-world trajectories. Texture is integer-hash
value noise, so renders are bit-identical across platforms and runs.

Dataset layout on disk::

    images/%06d.png   8-bit grayscale
    times.txt         id timestamp exposure
    camera.txt        calibration (see camera.load_calibration)
    groundtruth.txt   TUM trajectory (camera-to-world)
    affine_gt.txt     optional per-frame brightness corruption (id a b)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import (
    CameraModel,
    UnifiedOmniParams,
    load_calibration,
    omni_fx_for_fov,
    omni_project,
    omni_unproject_ray,
    pixel_grid,
    save_calibration,
)
from .geometry import SE3, Trajectory, load_tum, save_tum, so3_exp
from .image import Image, parse_times, read_image

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX3 = np.uint64(0xBF58476D1CE4E5B9)
_MIX4 = np.uint64(0x94D049BB133111EB)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Integer avalanche hash of lattice coordinates, uniform in [0, 1)."""
    h = ix.astype(np.uint64) * _MIX1
    h ^= iy.astype(np.uint64) * _MIX2
    h ^= np.uint64((seed * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(30)
    h *= _MIX3
    h ^= h >> np.uint64(27)
    h *= _MIX4
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Smoothstep-blended lattice value noise in [0, 1)."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    one = np.int64(1)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + one, iy, seed)
    v01 = _hash01(ix, iy + one, seed)
    v11 = _hash01(ix + one, iy + one, seed)
    wx = fx * fx * (3.0 - 2.0 * fx)
    wy = fy * fy * (3.0 - 2.0 * fy)
    top = v00 + (v10 - v00) * wx
    bot = v01 + (v11 - v01) * wx
    return top + (bot - top) * wy


def fbm_noise(
    x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 3, gain: float = 0.7
) -> np.ndarray:
    """Fractal sum of value noise, normalized back to [0, 1)."""
    total = np.zeros_like(np.asarray(x, float))
    amp = 1.0
    norm = 0.0
    for o in range(octaves):
        total += amp * value_noise(x * (2.0**o), y * (2.0**o), seed + 7919 * o)
        norm += amp
        amp *= gain
    return total / norm


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    base: float = 140.0
    contrast: float = 100.0
    tex_scale: float = 2.0  # noise lattice frequency on the unit sphere


@dataclass
class Scene:
    """Axis-aligned box room observed from inside, plus optional spheres.

    Face order: +x, -x, +y, -y, +z, -z. Contrast is the intensity swing of
    the value-noise texture; near-zero contrast makes a wall近 textureless.
    """

    half_extents: tuple = (1.0, 1.0, 1.0)
    seed: int = 7
    texture_scale: float = 0.15
    octave_gain: float = 0.7
    face_base: tuple = (120.0,) * 6
    face_contrast: tuple = (110.0,) * 6
    spheres: tuple = ()

    def contains(self, p: np.ndarray, margin: float = 0.05) -> bool:
        h = np.asarray(self.half_extents)
        return bool(np.all(np.abs(np.asarray(p)) < h - margin))


# face axis/sign and the in-plane axes used as texture coordinates
_FACES = [
    (0, +1, 1, 2),
    (0, -1, 1, 2),
    (1, +1, 0, 2),
    (1, -1, 0, 2),
    (2, +1, 0, 1),
    (2, -1, 0, 1),
]


def _ray_box_interior(origin: np.ndarray, dirs: np.ndarray, half: np.ndarray):
    """Exit intersection of interior rays with the box; returns (t, face_id)."""
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    face = np.full(n, -1, dtype=np.int64)
    for fid, (ax, sign, _, _) in enumerate(_FACES):
        d = dirs[:, ax]
        sel = (d > 1e-12) if sign > 0 else (d < -1e-12)
        t = np.full(n, np.inf)
        t[sel] = (sign * half[ax] - origin[ax]) / d[sel]
        better = (t > 1e-9) & (t < t_best)
        t_best[better] = t[better]
        face[better] = fid
    return t_best, face


def _shade_faces(scene: Scene, pts: np.ndarray, face: np.ndarray) -> np.ndarray:
    out = np.zeros(len(pts))
    for fid, (_, _, ua, va) in enumerate(_FACES):
        sel = face == fid
        if not np.any(sel):
            continue
        u = pts[sel, ua] / scene.texture_scale
        v = pts[sel, va] / scene.texture_scale
        tex = fbm_noise(u, v, scene.seed + 104729 * (fid + 1), gain=scene.octave_gain)
        out[sel] = scene.face_base[fid] + scene.face_contrast[fid] * (2.0 * tex - 1.0)
    return np.clip(out, 0.0, 255.0)


def _intersect_spheres(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    for si, sp in enumerate(scene.spheres):
        oc = origin - np.asarray(sp.center, float)
        b = dirs @ oc
        c = oc @ oc - sp.radius**2
        disc = b * b - c
        ok = disc > 0
        s = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - s
        t_far = -b + s  # camera may be inside the sphere
        t = np.where(t_near > 1e-9, t_near, t_far)
        hit = ok & (t > 1e-9) & (t < t_best)
        t_best[hit] = t[hit]
        which[hit] = si
    return t_best, which


def _shade_spheres(scene: Scene, pts: np.ndarray, which: np.ndarray) -> np.ndarray:
    out = np.zeros(len(pts))
    for si, sp in enumerate(scene.spheres):
        sel = which == si
        if not np.any(sel):
            continue
        local = (pts[sel] - np.asarray(sp.center, float)) / sp.radius
        k = sp.tex_scale
        tex = fbm_noise(
            k * local[:, 0] + 2.0 * k * local[:, 2],
            k * local[:, 1] - 2.0 * k * local[:, 2],
            scene.seed + 15486047 * (si + 1),
            gain=scene.octave_gain,
        )
        out[sel] = sp.base + sp.contrast * (2.0 * tex - 1.0)
    return np.clip(out, 0.0, 255.0)


def _trace(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Intensity and hit distance for unit world-frame rays from `origin`."""
    half = np.asarray(scene.half_extents, float)
    t_box, face = _ray_box_interior(origin, dirs, half)
    inten = _shade_faces(scene, origin + dirs * t_box[:, None], face)
    t = t_box
    if scene.spheres:
        t_sph, which = _intersect_spheres(scene, origin, dirs)
        closer = t_sph < t_box
        if np.any(closer):
            pts = origin + dirs * t_sph[:, None]
            sph_inten = _shade_spheres(scene, pts, which)
            inten = np.where(closer, sph_inten, inten)
            t = np.where(closer, t_sph, t_box)
    return inten, t


_SUBPIXEL = np.array([[-0.25, -0.25], [0.25, -0.25], [-0.25, 0.25], [0.25, 0.25]])


def render(scene: Scene, pose_wc: SE3, cam: CameraModel, supersample: bool = True):
    """Render one view; returns ``(Image, inverse-distance map)``.

    `pose_wc` is camera-to-world. Intensity is the mean over a 2x2 subpixel
    grid; the ground-truth inverse distance is measured on the exact pixel
    center ray (Euclidean distance, so it stays valid behind the image plane).
    """
    if not scene.contains(pose_wc.t):
        raise ValueError(f"camera at {pose_wc.t} is outside the room")
    grid = pixel_grid(cam.width, cam.height)
    R = pose_wc.R
    origin = pose_wc.t

    rays_c, _ = omni_unproject_ray(grid, cam.params)
    rays_w = rays_c @ R.T
    center_inten, t_center = _trace(scene, origin, rays_w)

    if supersample:
        acc = np.zeros(len(grid))
        for off in _SUBPIXEL:
            rays_c, _ = omni_unproject_ray(grid + off, cam.params)
            sub_inten, _ = _trace(scene, origin, rays_c @ R.T)
            acc += sub_inten
        inten = acc / len(_SUBPIXEL)
    else:
        inten = center_inten

    H, W = cam.height, cam.width
    inv_dist = (1.0 / t_center).reshape(H, W)
    return Image(inten.reshape(H, W)), inv_dist


@dataclass
class SequenceSpec:
    """Parametric camera path through a scene plus recording options."""

    name: str = "sequence"
    n_frames: int = 100
    fps: float = 30.0
    cam: CameraModel = None
    scene: Scene = field(default_factory=Scene)
    path: str = "circle"  # circle | line
    radius: float = 0.35
    height: float = 0.0
    loops: float = 1.0
    line_start: tuple = (0.0, 0.0, 0.0)
    line_end: tuple = (0.1, 0.0, 0.0)
    jitter_pos: float = 0.0
    jitter_rot_deg: float = 0.0
    seed: int = 0
    exposure_base: float = 1.0
    exposure_amplitude: float = 0.0  # relative sine swing of exposure time
    affine_amplitude_a: float = 0.0
    affine_amplitude_b: float = 0.0

    def __post_init__(self):
        if self.cam is None:
            fx = omni_fx_for_fov(185.0, 480, 1.0)
            self.cam = CameraModel(UnifiedOmniParams(fx, fx, 239.5, 239.5, 1.0), 480, 480)


def _look_rotation(forward: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with z forward, y down (world z is up)."""
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(f, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(f, right)
    R = np.stack([right, down, f], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 1] = -R[:, 1]
    return R


def _jitter_series(rng, n: int, fps: float, amplitude: float) -> np.ndarray:
    """Smooth deterministic handheld-style wobble, one (n, 3) series."""
    t = np.arange(n) / fps
    out = np.zeros((n, 3))
    if amplitude == 0.0:
        return out
    for axis in range(3):
        f1, f2 = rng.uniform(0.4, 1.2), rng.uniform(1.3, 2.6)
        p1, p2 = rng.uniform(0, 2 * math.pi, 2)
        out[:, axis] = amplitude * (
            0.7 * np.sin(2 * math.pi * f1 * t + p1) + 0.3 * np.sin(2 * math.pi * f2 * t + p2)
        )
    return out


def make_trajectory(spec: SequenceSpec):
    """Ground-truth camera-to-world poses and timestamps for a spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_frames
    ts = np.arange(n) / spec.fps
    jit_p = _jitter_series(rng, n, spec.fps, spec.jitter_pos)
    jit_r = _jitter_series(rng, n, spec.fps, math.radians(spec.jitter_rot_deg))
    poses = []
    for k in range(n):
        if spec.path == "circle":
            ang = 2 * math.pi * spec.loops * k / n
            pos = np.array(
                [spec.radius * math.cos(ang), spec.radius * math.sin(ang), spec.height]
            )
            forward = np.array([-math.sin(ang), math.cos(ang), 0.0])
        elif spec.path == "line":
            a = np.asarray(spec.line_start, float)
            b = np.asarray(spec.line_end, float)
            frac = k / max(n - 1, 1)
            pos = a + (b - a) * frac
            forward = np.array([0.0, 1.0, 0.0])
        else:
            raise ValueError(f"unknown path type '{spec.path}'")
        R = _look_rotation(forward) @ so3_exp(jit_r[k])
        poses.append(SE3.from_Rt(R, pos + jit_p[k]))
    return ts, poses


def generate_sequence(spec: SequenceSpec, outdir) -> Path:
    """Render a full dataset to disk; byte-identical for identical specs."""
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ts, poses = make_trajectory(spec)
    for pose in poses:
        if not spec.scene.contains(pose.t):
            raise ValueError("trajectory leaves the room")

    from PIL import Image as PILImage

    exposures = np.full(spec.n_frames, spec.exposure_base)
    if spec.exposure_amplitude > 0:
        exposures *= 1.0 + spec.exposure_amplitude * np.sin(
            2 * math.pi * np.arange(spec.n_frames) / max(spec.n_frames - 1, 1) * 2.0
        )
    rng = np.random.default_rng(spec.seed + 991)
    affine = np.zeros((spec.n_frames, 2))
    if spec.affine_amplitude_a > 0 or spec.affine_amplitude_b > 0:
        affine[:, 0] = rng.uniform(-spec.affine_amplitude_a, spec.affine_amplitude_a, spec.n_frames)
        affine[:, 1] = rng.uniform(-spec.affine_amplitude_b, spec.affine_amplitude_b, spec.n_frames)

    for k, pose in enumerate(poses):
        img, _ = render(spec.scene, pose, spec.cam)
        data = img.data * (exposures[k] / spec.exposure_base) * math.exp(affine[k, 0])
        data = data + affine[k, 1]
        quantized = np.clip(np.rint(data), 0, 255).astype(np.uint8)
        PILImage.fromarray(quantized, mode="L").save(out / "images" / f"{k:06d}.png")

    with open(out / "times.txt", "w") as f:
        for k in range(spec.n_frames):
            f.write(f"{k:06d} {ts[k]:.9f} {exposures[k]:.9f}\n")
    save_calibration(out / "camera.txt", spec.cam)
    save_tum(out / "groundtruth.txt", Trajectory(ts, poses))
    if np.any(affine != 0.0):
        with open(out / "affine_gt.txt", "w") as f:
            for k in range(spec.n_frames):
                f.write(f"{k:06d} {affine[k, 0]:.9f} {affine[k, 1]:.9f}\n")
    return out


class DatasetError(Exception):
    pass


def _remap_view(src_model: CameraModel, dst_model: CameraModel):
    """dst-pixel -> src-pixel sampling map between two central camera models."""
    grid = pixel_grid(dst_model.width, dst_model.height)
    rays, ok_r = omni_unproject_ray(grid, dst_model.params)
    uv, ok_p = omni_project(rays, src_model.params)
    ok = (
        ok_r
        & ok_p
        & (uv[:, 0] >= 0)
        & (uv[:, 0] <= src_model.width - 1)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= src_model.height - 1)
    )
    return uv.reshape(dst_model.height, dst_model.width, 2), ok.reshape(
        dst_model.height, dst_model.width
    )


def pinhole_crop_model(src_model: CameraModel, fov_deg: float = 90.0) -> CameraModel:
    """Pinhole view of the central image region, as a zero-xi unified model."""
    w, h = src_model.width, src_model.height
    f = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraModel(
        UnifiedOmniParams(f, f, (w - 1) / 2.0, (h - 1) / 2.0, 0.0), w, h, None
    )


@dataclass
class Dataset:
    root: Path
    calib: CameraModel
    entries: list  # (frame_id, timestamp, exposure, image path)
    groundtruth: Trajectory | None = None
    _remap: np.ndarray | None = None
    _remap_valid: np.ndarray | None = None
    _source_calib: CameraModel | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries])

    def load_frame(self, index: int) -> Image:
        fid, ts, exposure, path = self.entries[index]
        img = read_image(path, exposure_t=exposure)
        if self._remap is not None:
            from .camera import _bilinear

            data = _bilinear(img.data, self._remap[..., 0], self._remap[..., 1])
            data[~self._remap_valid] = 0.0
            img = Image(data, exposure_t=exposure)
        return img

    def frames(self):
        for i in range(len(self.entries)):
            yield i, self.entries[i][1], self.load_frame(i)


def load_dataset(
    path,
    camera_mode: str = "omni",
    pinhole_fov_deg: float = 90.0,
    target_size: tuple | None = None,
) -> Dataset:
    """Open a dataset directory and stream frames in timestamp order.

    ``camera_mode='pinhole-crop'`` resamples every frame to a central pinhole
    view (the part of the fisheye image a conventional projection can use).
    `target_size` optionally center-crops around the principal point and
    rescales, adjusting the calibration accordingly.
    """
    root = Path(path)
    cam_file = root / "camera.txt"
    if not cam_file.exists():
        raise DatasetError(f"{root}: missing camera.txt")
    calib = load_calibration(cam_file)

    times_file = root / "times.txt"
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    if times_file.exists():
        raw_entries = parse_times(times_file)
    else:
        ids = sorted(p.stem for p in img_dir.iterdir() if p.suffix in (".png", ".pgm"))
        raw_entries = [(fid, i / 30.0, 1.0) for i, fid in enumerate(ids)]

    entries = []
    for fid, ts, exposure in raw_entries:
        img_path = None
        for ext in (".png", ".pgm"):
            cand = img_dir / f"{fid}{ext}"
            if cand.exists():
                img_path = cand
                break
        if img_path is None:
            raise DatasetError(f"{root}: missing image for frame id '{fid}'")
        entries.append((fid, ts, exposure, img_path))
    ts_arr = np.array([e[1] for e in entries])
    if np.any(np.diff(ts_arr) <= 0):
        raise DatasetError(f"{root}: timestamps are not strictly increasing")

    gt = None
    gt_file = root / "groundtruth.txt"
    if gt_file.exists():
        gt = load_tum(gt_file)

    source_calib = calib
    remap = remap_valid = None
    if target_size is not None and (target_size[0] != calib.width or target_size[1] != calib.height):
        tw, th = target_size
        crop = min(calib.width, calib.height)
        scale = tw / crop
        p = calib.params
        u0 = p.cx - (crop - 1) / 2.0
        v0 = p.cy - (crop - 1) / 2.0
        cx = (p.cx - u0 + 0.5) * scale - 0.5
        cy = (p.cy - v0 + 0.5) * scale - 0.5
        calib = CameraModel(
            UnifiedOmniParams(p.fx * scale, p.fy * scale, cx, cy, p.xi), tw, th, None
        )
    if camera_mode == "pinhole-crop":
        calib = pinhole_crop_model(calib, pinhole_fov_deg)
    elif camera_mode != "omni":
        raise DatasetError(f"unknown camera mode '{camera_mode}'")
    if calib is not source_calib:
        remap, remap_valid = _remap_view(source_calib, calib)

    return Dataset(root, calib, entries, gt, remap, remap_valid, source_calib)
