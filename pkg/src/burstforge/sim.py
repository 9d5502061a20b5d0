"""Synthetic burst generation.

Seeding: a sample drawn with integer ``seed`` uses
``default_rng([seed])`` for sample-level choices (crop position, white
balance gains) and ``default_rng([seed, frame, stream])`` per frame, with
stream 0 for motion and 1 for noise. Samples and frames are therefore
independent of generation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

GAIN_TABLE = {
    # gain: (log10 sigma_read, log10 sigma_shot)
    1: (-2.2, -2.6),
    2: (-1.8, -2.2),
    4: (-1.4, -1.8),
    8: (-1.1, -1.5),
}
UNSEEN_GAINS = frozenset({8})

# Camera -> sRGB colour correction; identity unless configured.
DEFAULT_CCM = np.eye(3)

STREAM_MOTION = 0
STREAM_NOISE = 1


@dataclass(frozen=True)
class NoiseParams:
    sigma_read: float
    sigma_shot: float
    gain_label: Optional[int] = None

    def __post_init__(self):
        if self.sigma_read < 0 or self.sigma_shot < 0:
            raise ValueError("noise parameters must be non-negative")

    @classmethod
    def from_gain(cls, gain: int) -> "NoiseParams":
        if gain not in GAIN_TABLE:
            raise ValueError(f"invalid gain {gain!r}; expected one of {sorted(GAIN_TABLE)}")
        lr, ls = GAIN_TABLE[gain]
        return cls(10.0 ** lr, 10.0 ** ls, gain)

    @property
    def unseen(self) -> bool:
        return self.gain_label in UNSEEN_GAINS

    def variance(self, x):
        return self.sigma_read ** 2 + self.sigma_shot * np.asarray(x)

    def to_dict(self) -> dict:
        return {"sigma_read": self.sigma_read, "sigma_shot": self.sigma_shot,
                "gain": self.gain_label, "unseen_during_training": self.unseen}


@dataclass
class BurstSample:
    burst: np.ndarray          # [B, C, h, w]
    ground_truth: np.ndarray   # [C_gt, H, W]
    transforms: list           # per frame {"dy", "dx", "angle_deg"}
    noise: NoiseParams
    task: str
    seed: int
    meta: dict = field(default_factory=dict)


def frame_rng(seed: int, frame: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, frame, stream])


# ------------------------------------------------------------ camera model

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def inverse_isp(srgb: np.ndarray, rng: Optional[np.random.Generator] = None,
                ccm: np.ndarray = DEFAULT_CCM, gains: Optional[tuple] = None) -> tuple[np.ndarray, dict]:
    """sRGB ``[3,H,W]`` in [0,1] -> linear camera RGB, plus the gains used.

    Red and blue are divided by white-balance gains drawn from U[1.5, 2.5]
    unless ``gains`` is given (``(1, 1)`` disables them).
    """
    srgb = np.asarray(srgb, dtype=np.float64)
    if srgb.ndim != 3 or srgb.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] sRGB, got {srgb.shape}")
    if srgb.min() < 0 or srgb.max() > 1:
        raise ValueError("sRGB input must lie in [0, 1]")
    if gains is None:
        rng = rng or np.random.default_rng()
        gains = (float(rng.uniform(1.5, 2.5)), float(rng.uniform(1.5, 2.5)))
    red_gain, blue_gain = gains
    lin = srgb_to_linear(srgb)
    cam = np.einsum("ij,jhw->ihw", np.linalg.inv(ccm), lin)
    cam[0] /= red_gain
    cam[2] /= blue_gain
    return np.clip(cam, 0.0, 1.0), {"red_gain": red_gain, "blue_gain": blue_gain}


# ------------------------------------------------------------------ motion

def _bilinear_numpy(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    out = np.zeros((c,) + ys.shape, dtype=np.float64)
    for dy, dx, wt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                       (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        v = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += v * (wt * valid)
    return out


def apply_warp(img: np.ndarray, transform: dict) -> np.ndarray:
    """Rotate by ``angle_deg`` about the centre, then translate by (dy, dx).

    Output pixel p samples the input at R^-1 (p - centre - t) + centre.
    """
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    theta = math.radians(transform["angle_deg"])
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    py = yy - cy - transform["dy"]
    px = xx - cx - transform["dx"]
    cos, sin = math.cos(theta), math.sin(theta)
    src_y = cos * py - sin * px + cy
    src_x = sin * py + cos * px + cx
    return _bilinear_numpy(img, src_y, src_x)


def random_transform(max_translation: float, max_rotation_deg: float,
                     rng: np.random.Generator) -> dict:
    if max_translation < 0 or max_rotation_deg < 0:
        raise ValueError("warp bounds must be non-negative")
    dy, dx = rng.uniform(-max_translation, max_translation, size=2) if max_translation else (0.0, 0.0)
    angle = rng.uniform(-max_rotation_deg, max_rotation_deg) if max_rotation_deg else 0.0
    return {"dy": float(dy), "dx": float(dx), "angle_deg": float(angle)}


def random_warp(img: np.ndarray, max_translation: float, max_rotation_deg: float,
                seed: int, frame: int = 1) -> tuple[np.ndarray, dict]:
    """Warp by a random rigid motion. Frame 0 is always the identity."""
    if frame == 0:
        tr = {"dy": 0.0, "dx": 0.0, "angle_deg": 0.0}
    else:
        tr = random_transform(max_translation, max_rotation_deg, frame_rng(seed, frame, STREAM_MOTION))
    return apply_warp(img, tr), tr


def warp_margin(size: int, max_translation: float, max_rotation_deg: float) -> int:
    """Border needed so rotating/translating never pulls zeros into a centred crop."""
    th = math.radians(max_rotation_deg)
    rot = (size / 2.0) * (abs(math.sin(th)) + 1 - math.cos(th)) * math.sqrt(2)
    return int(math.ceil(max_translation + rot)) + 2


# ---------------------------------------------------------------- sampling

def _resize_axis(img: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    out_n = n // factor
    src = (np.arange(out_n) + 0.5) * factor - 0.5
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    t = src - np.floor(src)
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = out_n
    t = t.reshape(shape)
    return a * (1 - t) + b * t


def downsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear resize by an integer factor with half-pixel centres (no antialiasing)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    return _resize_axis(_resize_axis(img, factor, img.ndim - 2), factor, img.ndim - 1)


def mosaic_and_pack(rgb: np.ndarray) -> np.ndarray:
    """RGGB mosaic of ``[3,H,W]`` packed as ``[4,H/2,W/2]`` = (R, G1, G2, B)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {rgb.shape}")
    h, w = rgb.shape[1:]
    if h % 2 or w % 2:
        raise ValueError(f"mosaic needs even extents, got {h}x{w}")
    return np.stack([rgb[0, 0::2, 0::2], rgb[1, 0::2, 1::2], rgb[1, 1::2, 0::2], rgb[2, 1::2, 1::2]])


def unpack_mosaic(packed: np.ndarray) -> np.ndarray:
    """``[4,h,w]`` -> single-plane Bayer mosaic ``[2h,2w]``."""
    _, h, w = packed.shape
    out = np.zeros((2 * h, 2 * w), dtype=packed.dtype)
    out[0::2, 0::2] = packed[0]
    out[0::2, 1::2] = packed[1]
    out[1::2, 0::2] = packed[2]
    out[1::2, 1::2] = packed[3]
    return out


def pack_mosaic(mosaic: np.ndarray) -> np.ndarray:
    return np.stack([mosaic[0::2, 0::2], mosaic[0::2, 1::2], mosaic[1::2, 0::2], mosaic[1::2, 1::2]])


def add_noise(x: np.ndarray, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """x + N(0, sigma_read^2 + sigma_shot * x), unclipped."""
    x = np.asarray(x, dtype=np.float64)
    var = params.variance(np.maximum(x, 0.0))
    return x + rng.standard_normal(x.shape) * np.sqrt(var)


def flip_image(img: np.ndarray, hflip: bool, vflip: bool) -> np.ndarray:
    if hflip:
        img = img[..., :, ::-1]
    if vflip:
        img = img[..., ::-1, :]
    return np.ascontiguousarray(img)


# ----------------------------------------------------------------- samples

def _random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"source image {h}x{w} too small for a {size}x{size} crop")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[:, y:y + size, x:x + size]


def make_sr_burst(srgb: np.ndarray, burst_size: int = 14, crop: int = 48, scale: int = 4,
                  seed: int = 0, max_translation: float = 8.0, max_rotation_deg: float = 1.0,
                  noise: Optional[NoiseParams] = None, flips: tuple = (False, False),
                  gains: Optional[tuple] = None) -> BurstSample:
    """Build one RAW burst for x``scale`` super-resolution.

    ``crop`` is the side of each low-resolution mosaicked frame, so frames
    come out packed as ``[4, crop/2, crop/2]`` and the sRGB ground truth is
    ``[3, crop*scale, crop*scale]``.
    """
    if crop % 2:
        raise ValueError("crop must be even for Bayer packing")
    noise = noise or NoiseParams.from_gain(1)
    rng = np.random.default_rng([seed])
    hr = crop * scale
    margin = warp_margin(hr, max_translation, max_rotation_deg)
    big = _random_crop(np.asarray(srgb, dtype=np.float64), hr + 2 * margin, rng)
    big = flip_image(big, *flips)
    linear, wb = inverse_isp(big, rng, gains=gains)
    gt = big[:, margin:margin + hr, margin:margin + hr].copy()

    frames, transforms = [], []
    for b in range(burst_size):
        warped, tr = random_warp(linear, max_translation, max_rotation_deg, seed, b)
        hr_frame = warped[:, margin:margin + hr, margin:margin + hr]
        lr = downsample_bilinear(hr_frame, scale)
        packed = mosaic_and_pack(lr)
        frames.append(add_noise(packed, noise, frame_rng(seed, b, STREAM_NOISE)))
        transforms.append(tr)
    meta = {"white_balance": wb, "flips": list(flips), "crop": crop, "scale": scale,
            "margin": margin, "max_translation": max_translation,
            "max_rotation_deg": max_rotation_deg}
    return BurstSample(np.stack(frames), gt, transforms, noise, f"sr_x{scale}", seed, meta)


def make_denoise_burst(img: np.ndarray, burst_size: int = 8, crop: int = 128, gain: int = 1,
                       seed: int = 0, max_translation: float = 2.0,
                       noise: Optional[NoiseParams] = None, flips: tuple = (False, False)) -> BurstSample:
    """Noisy, translated burst of an sRGB image (``[1,H,W]`` or ``[3,H,W]``).

    ``noise`` overrides the gain table, e.g. ``NoiseParams(0, 0)`` for a
    clean burst.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3,H,W] image, got {img.shape}")
    params = noise if noise is not None else NoiseParams.from_gain(gain)
    rng = np.random.default_rng([seed])
    margin = warp_margin(crop, max_translation, 0.0)
    big = flip_image(_random_crop(img, crop + 2 * margin, rng), *flips)
    gt = big[:, margin:margin + crop, margin:margin + crop].copy()
    frames, transforms = [], []
    for b in range(burst_size):
        warped, tr = random_warp(big, max_translation, 0.0, seed, b)
        clean = warped[:, margin:margin + crop, margin:margin + crop]
        frames.append(add_noise(clean, params, frame_rng(seed, b, STREAM_NOISE)))
        transforms.append(tr)
    task = "denoise_gray" if img.shape[0] == 1 else "denoise_color"
    meta = {"flips": list(flips), "crop": crop, "margin": margin, "max_translation": max_translation}
    return BurstSample(np.stack(frames), gt, transforms, params, task, seed, meta)


def make_lowlight_burst(srgb: np.ndarray, burst_size: int = 8, crop: int = 64, seed: int = 0,
                        exposure: float = 0.05, max_translation: float = 2.0, gain: int = 4,
                        flips: tuple = (False, False)) -> BurstSample:
    """Dark, noisy packed RAW burst with a full-resolution sRGB target.

    ``crop`` is the side of the packed frames; the target is twice that.
    """
    params = NoiseParams.from_gain(gain)
    rng = np.random.default_rng([seed])
    full = 2 * crop
    margin = warp_margin(full, max_translation, 0.0)
    big = flip_image(_random_crop(np.asarray(srgb, dtype=np.float64), full + 2 * margin, rng), *flips)
    linear, wb = inverse_isp(big, rng)
    gt = big[:, margin:margin + full, margin:margin + full].copy()
    frames, transforms = [], []
    for b in range(burst_size):
        warped, tr = random_warp(linear, max_translation, 0.0, seed, b)
        dark = mosaic_and_pack(warped[:, margin:margin + full, margin:margin + full]) * exposure
        frames.append(add_noise(dark, params, frame_rng(seed, b, STREAM_NOISE)))
        transforms.append(tr)
    meta = {"white_balance": wb, "flips": list(flips), "crop": crop, "margin": margin,
            "exposure": exposure, "max_translation": max_translation}
    return BurstSample(np.stack(frames), gt, transforms, params, "lowlight", seed, meta)
