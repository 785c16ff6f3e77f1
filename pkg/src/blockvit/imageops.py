"""Image transforms on float (H, W, C) arrays in [0, 1].

All random transforms draw from an explicit ``numpy.random.Generator`` so
the same generator state always yields the same output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def resize_bilinear(image: np.ndarray, size: int | tuple) -> np.ndarray:
    """Bilinear resize with half-pixel centres.

    Output pixel ``i`` samples input coordinate ``(i + 0.5) * in/out - 0.5``,
    clamped to the valid range, and interpolates linearly between the two
    neighbouring pixels along each axis. A 2x downscale therefore averages
    each 2x2 input block exactly.
    """
    if isinstance(size, int):
        size = (size, size)
    oh, ow = size
    h, w = image.shape[:2]
    if (h, w) == (oh, ow):
        return image.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out.astype(image.dtype)


def crop(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    return image[top:top + height, left:left + width]


def random_resized_crop(image, size, scale, rng, ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area fraction in ``scale`` and aspect ratio in ``ratio``, then resize."""
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        log_r = np.log(ratio)
        ar = np.exp(rng.uniform(log_r[0], log_r[1]))
        cw = int(round(np.sqrt(target * ar)))
        ch = int(round(np.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return resize_bilinear(crop(image, top, left, ch, cw), size)
    side = min(h, w)
    return resize_bilinear(crop(image, (h - side) // 2, (w - side) // 2, side, side), size)


def hflip(image):
    return image[:, ::-1].copy()


def vflip(image):
    return image[::-1].copy()


def rotate(image, degrees: float) -> np.ndarray:
    return ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def adjust_sharpness(image, factor: float) -> np.ndarray:
    """Blend with a smoothed copy: 0 = blurred, 1 = original, >1 = sharpened."""
    img = image.astype(np.float64)
    blurred = np.stack([ndimage.convolve(img[..., c], _SMOOTH, mode="nearest") for c in range(img.shape[2])], -1)
    return np.clip(blurred + factor * (img - blurred), 0, 1).astype(image.dtype)


def color_jitter(image, brightness, contrast, saturation, rng) -> np.ndarray:
    img = image.astype(np.float64)
    if brightness:
        img = img * rng.uniform(1 - brightness, 1 + brightness)
    if contrast:
        m = img.mean()
        img = (img - m) * rng.uniform(1 - contrast, 1 + contrast) + m
    if saturation:
        grey = img.mean(axis=2, keepdims=True)
        img = (img - grey) * rng.uniform(1 - saturation, 1 + saturation) + grey
    return np.clip(img, 0, 1).astype(image.dtype)


@dataclass
class AugmentPolicy:
    """Which random transforms are applied, and how strongly."""

    resized_crop: bool = False
    crop_scale: tuple = (0.6, 1.0)
    color_jitter: bool = False
    jitter: tuple = (0.2, 0.2, 0.2)
    hflip: bool = False
    vflip: bool = False
    rotation: bool = False
    max_degrees: float = 15.0
    sharpness: bool = False
    sharpness_range: tuple = (0.5, 2.0)

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def default(cls) -> "AugmentPolicy":
        return cls(resized_crop=True, color_jitter=True, hflip=True, vflip=True, rotation=True, sharpness=True)


def augment(image, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Compose the enabled transforms; identity when none are enabled."""
    out = image
    if policy.resized_crop:
        out = random_resized_crop(out, out.shape[:2], policy.crop_scale, rng)
    if policy.color_jitter:
        out = color_jitter(out, *policy.jitter, rng)
    if policy.hflip and rng.random() < 0.5:
        out = hflip(out)
    if policy.vflip and rng.random() < 0.5:
        out = vflip(out)
    if policy.rotation:
        out = rotate(out, rng.uniform(-policy.max_degrees, policy.max_degrees))
    if policy.sharpness:
        out = adjust_sharpness(out, rng.uniform(*policy.sharpness_range))
    return out if out is not image else image.copy()
