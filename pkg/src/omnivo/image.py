"""Image storage, 5-level pyramids, and sub-pixel intensity/gradient lookup.

Intensities are kept as real scalars in [0, 255]; gradients come from
central differences (one-sided at borders) and are interpolated bilinearly,
which is exact on affine intensity fields.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

PYRAMID_LEVELS = 5


@dataclass
class Image:
    data: np.ndarray
    exposure_t: float = 1.0
    _gx: np.ndarray | None = field(default=None, repr=False, compare=False)
    _gy: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("image data must be 2-D")
        if self.exposure_t <= 0:
            raise ValueError("exposure must be positive")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def gradients(self):
        if self._gx is None:
            gx = np.empty_like(self.data)
            gy = np.empty_like(self.data)
            gx[:, 1:-1] = 0.5 * (self.data[:, 2:] - self.data[:, :-2])
            gx[:, 0] = self.data[:, 1] - self.data[:, 0]
            gx[:, -1] = self.data[:, -1] - self.data[:, -2]
            gy[1:-1, :] = 0.5 * (self.data[2:, :] - self.data[:-2, :])
            gy[0, :] = self.data[1, :] - self.data[0, :]
            gy[-1, :] = self.data[-1, :] - self.data[-2, :]
            self._gx, self._gy = gx, gy
        return self._gx, self._gy


def interp(img: Image, uv):
    """Bilinear intensity and gradient at sub-pixel coordinates.

    `uv` is ``(2,)`` or ``(N, 2)`` in (u, v) = (column, row) order. Returns
    ``(intensity, gx, gy, valid)``; coordinates outside
    ``[0, w-2] x [0, h-2]`` are invalid (the residual owning them must be
    dropped, not clamped).
    """
    arr = np.asarray(uv, float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    u, v = pts[:, 0], pts[:, 1]
    w, h = img.width, img.height
    valid = (u >= 0) & (u <= w - 2) & (v >= 0) & (v <= h - 2)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = uc.astype(int)
    v0 = vc.astype(int)
    du = uc - u0
    dv = vc - v0
    w00 = (1 - du) * (1 - dv)
    w10 = du * (1 - dv)
    w01 = (1 - du) * dv
    w11 = du * dv

    def sample(a):
        return a[v0, u0] * w00 + a[v0, u0 + 1] * w10 + a[v0 + 1, u0] * w01 + a[v0 + 1, u0 + 1] * w11

    gx_img, gy_img = img.gradients()
    inten = sample(img.data)
    gx = sample(gx_img)
    gy = sample(gy_img)
    if single:
        return float(inten[0]), float(gx[0]), float(gy[0]), bool(valid[0])
    return inten, gx, gy, valid


@dataclass
class Pyramid:
    levels: list[Image]

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    @property
    def exposure_t(self) -> float:
        return self.levels[0].exposure_t


def _downsample_mean(data: np.ndarray) -> np.ndarray:
    h, w = data.shape
    h2, w2 = h // 2, w // 2
    d = data[: 2 * h2, : 2 * w2]
    return 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])


def build_pyramid(img: Image, levels: int = PYRAMID_LEVELS) -> Pyramid:
    """Mean-pooled pyramid; level ``l`` has the level-0 size right-shifted by ``l``."""
    if img.width < 32 or img.height < 32:
        raise ValueError(f"image {img.width}x{img.height} too small for a {levels}-level pyramid")
    out = [img]
    for _ in range(levels - 1):
        out.append(Image(_downsample_mean(out[-1].data), exposure_t=img.exposure_t))
    return Pyramid(out)


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) reader."""
    with open(path, "rb") as f:
        data = f.read()

    def tokens():
        i = 0
        while i < len(data):
            if data[i : i + 1].isspace():
                i += 1
                continue
            if data[i : i + 1] == b"#":
                while i < len(data) and data[i : i + 1] != b"\n":
                    i += 1
                continue
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            yield data[i:j], j
            i = j

    gen = tokens()
    magic, _ = next(gen)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, _ = next(gen)
    h, _ = next(gen)
    maxval, pos = next(gen)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval={maxval})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).astype(np.float64)


def read_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def read_image(path, exposure_t: float = 1.0) -> Image:
    path = str(path)
    if path.endswith(".pgm"):
        return Image(read_pgm(path), exposure_t=exposure_t)
    if path.endswith(".png"):
        return Image(read_png(path), exposure_t=exposure_t)
    raise ValueError(f"unsupported image format: {path}")


def parse_times(path):
    """Parse ``times.txt``: one ``id timestamp [exposure]`` entry per line.

    Returns a list of ``(frame_id, timestamp, exposure)``. Missing exposures
    default to 1.0 with a warning (datasets without exposure metadata are
    still usable; affine brightness absorbs the difference).
    """
    entries = []
    missing = False
    with open(path, "r") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{ln}: expected 'id timestamp [exposure]'")
            if len(parts) == 2:
                missing = True
                entries.append((parts[0], float(parts[1]), 1.0))
            else:
                exp = float(parts[2])
                entries.append((parts[0], float(parts[1]), exp if exp > 0 else 1.0))
    if missing:
        warnings.warn(f"{path}: exposure column missing, defaulting to 1.0", stacklevel=2)
    return entries


@dataclass
class PhotometricCalib:
    """Optional inverse response + vignette correction applied at ingestion."""

    inv_response: np.ndarray | None = None  # (256,) lookup, identity if None
    vignette: np.ndarray | None = None  # (H, W) multiplicative map, identity if None

    def apply(self, data: np.ndarray) -> np.ndarray:
        out = np.asarray(data, float)
        if self.inv_response is not None:
            idx = np.clip(out, 0, 255).astype(int)
            frac = np.clip(out, 0, 255) - idx
            hi = np.minimum(idx + 1, 255)
            out = self.inv_response[idx] * (1 - frac) + self.inv_response[hi] * frac
        if self.vignette is not None:
            out = out / np.maximum(self.vignette, 1e-6)
        return out
