"""
Augmentation sets and shift-cropped view pairs.

All operations are pure functions of ``(input, seed)``.
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR
from ssltr.dataset import BACKGROUND, LineImage, Transcription, normalize_height, pad_width
from ssltr.errors import SsltrError
from ssltr.frames import padded_width
from ssltr.types import AugKind


class CropWidthError(SsltrError, ValueError):
    """A crop width is not a positive multiple of the subsampling factor."""


class ImageTooNarrow(SsltrError, ValueError):
    """A line is too narrow to hold two frames."""


@dataclass(frozen=True)
class AugmentationSet:
    """
    Parameter ranges of an augmentation set. A strength of zero disables the transform
    (so a zero-strength set is the identity).
    """

    kind: AugKind = AugKind.VISUAL
    brightness: float = 0.2
    contrast: float = 0.2
    noise: float = 0.05
    gamma: Tuple[float, float] = (0.5, 2.0)
    blur: int = 5
    # geometry and masking, used by ``AugKind.ALL`` only
    skew: float = 0.3
    scale: Tuple[float, float] = (0.9, 1.1)
    mask_rate: float = 0.1
    mask_patches: Optional[int] = 3
    mask_width: int = 48
    mask_full_height: bool = False

    @classmethod
    def none(cls) -> "AugmentationSet":
        return cls(
            kind=AugKind.NONE,
            brightness=0.0,
            contrast=0.0,
            noise=0.0,
            gamma=(1.0, 1.0),
            blur=0,
            skew=0.0,
            scale=(1.0, 1.0),
            mask_rate=0.0,
        )

    @classmethod
    def visual(cls) -> "AugmentationSet":
        return cls(kind=AugKind.VISUAL)

    @classmethod
    def all(cls) -> "AugmentationSet":
        return cls(kind=AugKind.ALL)

    @classmethod
    def for_kind(cls, kind) -> "AugmentationSet":
        kind = AugKind(kind)
        return {AugKind.NONE: cls.none, AugKind.VISUAL: cls.visual, AugKind.ALL: cls.all}[
            kind
        ]()

    def zero_strength(self) -> "AugmentationSet":
        return replace(AugmentationSet.none(), kind=self.kind)

    def apply(self, image: LineImage, seed: int) -> LineImage:
        if self.kind is AugKind.ALL:
            return apply_all(image, None, seed, self)
        if self.kind is AugKind.VISUAL:
            return apply_visual(image, seed, self)
        return image


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _motion_kernel(size: int, angle: float) -> np.ndarray:
    kernel = np.zeros((size, size), np.float32)
    c = (size - 1) / 2
    for t in np.linspace(-c, c, 4 * size):
        x = int(round(c + t * np.cos(angle)))
        y = int(round(c + t * np.sin(angle)))
        kernel[y, x] = 1.0
    return kernel / kernel.sum()


def _disk_kernel(size: int) -> np.ndarray:
    r = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size]
    kernel = (((yy - r) ** 2 + (xx - r) ** 2) <= r * r + 1e-6).astype(np.float32)
    return kernel / kernel.sum()


def apply_visual(
    image: LineImage, seed: int, aug: Optional[AugmentationSet] = None
) -> LineImage:
    """Colour/intensity, gamma, blur and noise; never changes the image size."""
    aug = aug or AugmentationSet.visual()
    rng = np.random.default_rng(seed)
    x = image.pixels.astype(np.float32, copy=True)

    if aug.contrast > 0 or aug.brightness > 0:
        c = 1.0 + _uniform(rng, -aug.contrast, aug.contrast)
        b = _uniform(rng, -aug.brightness, aug.brightness)
        x = np.clip((x - 0.5) * c + 0.5 + b, 0.0, 1.0)

    lo, hi = aug.gamma
    if not lo == hi == 1.0:
        g = lo if lo == hi else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        x = np.power(x, g, dtype=np.float32)

    if aug.blur >= 3:
        kind = int(rng.integers(3))
        size = int(rng.choice(np.arange(3, aug.blur + 1, 2)))
        if kind == 1:
            kernel = _motion_kernel(size, float(rng.uniform(0, np.pi)))
            x = ndimage.convolve(x, kernel, mode="nearest")
        elif kind == 2:
            x = ndimage.convolve(x, _disk_kernel(size), mode="nearest")

    if aug.noise > 0:
        sigma = float(rng.uniform(0, aug.noise))
        x = x + rng.normal(0.0, sigma, x.shape).astype(np.float32)

    return image.with_pixels(np.clip(x, 0.0, 1.0))


def _geometry(x: np.ndarray, shear: float, fx: float, fy: float) -> np.ndarray:
    h, w = x.shape
    mid = h / 2
    out_w = max(SUBSAMPLE_FACTOR, int(round(w * fx + abs(shear) * h)))
    offset = abs(shear) * mid
    # forward: x' = fx*x + shear*(mid - y) + offset, y' = fy*(y - mid) + mid
    a = 1.0 / fx
    b = shear / (fx * fy)
    c = (shear / fx) * (mid - mid / fy) - (offset + shear * mid) / fx
    e = 1.0 / fy
    f = mid - mid / fy
    out = Image.fromarray(x.astype(np.float32)).transform(
        (out_w, h),
        Image.Transform.AFFINE,
        (a, b, c, 0.0, e, f),
        resample=Image.Resampling.BILINEAR,
        fillcolor=BACKGROUND,
    )
    return np.asarray(out, dtype=np.float32)


def _mask(x: np.ndarray, aug: AugmentationSet, rng: np.random.Generator) -> np.ndarray:
    h, w = x.shape
    slots = -(-w // aug.mask_width)
    count = int(np.ceil(aug.mask_rate * slots))
    if aug.mask_patches is not None:
        count = min(count, aug.mask_patches)
    if count <= 0:
        return x
    x = x.copy()
    for slot in rng.permutation(slots)[:count]:
        x0 = int(slot) * aug.mask_width
        x1 = min(w, x0 + aug.mask_width)
        if aug.mask_full_height:
            y0, y1 = 0, h
        else:
            rh = int(rng.integers(h // 2, h + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            y1 = y0 + rh
        x[y0:y1, x0:x1] = BACKGROUND
    return x


def apply_all(
    image: LineImage,
    transcription: Optional[Transcription] = None,
    seed: int = 0,
    aug: Optional[AugmentationSet] = None,
) -> LineImage:
    """
    Visual augmentation (same draw as ``apply_visual`` for the seed), then skew/scale and
    rectangular masking. The transcription is not altered by any transform.
    """
    aug = aug or AugmentationSet.all()
    out = apply_visual(image, seed, aug)
    rng = np.random.default_rng([seed, 1])
    shear = _uniform(rng, -aug.skew, aug.skew)
    fx = _uniform(rng, *aug.scale)
    fy = _uniform(rng, *aug.scale)
    x = out.pixels
    if shear != 0.0 or fx != 1.0 or fy != 1.0:
        x = _geometry(x, shear, fx, fy)
        if x.shape[0] != LINE_HEIGHT:
            x = normalize_height(out.with_pixels(x)).pixels
    if aug.mask_rate > 0:
        x = _mask(x, aug, rng)
    return out.with_pixels(np.clip(x, 0.0, 1.0))


@dataclass(frozen=True)
class ViewPair:
    """
    Two crops of one line. Frame ``i`` of ``view_a`` shows the same pixels as frame
    ``i - shift_frames`` of ``view_b`` for ``i`` in ``overlap`` (a half-open interval of
    ``view_a`` frame indices).
    """

    view_a: LineImage
    view_b: LineImage
    shift_frames: int
    overlap: Tuple[int, int]
    position_a: int
    position_b: int

    @property
    def pixel_shift(self) -> int:
        return self.shift_frames * SUBSAMPLE_FACTOR

    def correspondence(self) -> Tuple[np.ndarray, np.ndarray]:
        idx_a = np.arange(*self.overlap)
        return idx_a, idx_a - self.shift_frames


def make_view_pair(
    image: LineImage,
    crop_width: int,
    seed: int,
    aug: Optional[AugmentationSet] = None,
    shift: bool = True,
) -> ViewPair:
    """
    Crop two frame-aligned windows of ``crop_width`` pixels whose positions differ by a
    uniformly drawn shift keeping at least one frame of overlap, then augment each view
    independently. ``shift=False`` forces a zero shift.
    """
    if crop_width <= 0 or crop_width % SUBSAMPLE_FACTOR:
        raise CropWidthError(f"crop width {crop_width} is not a multiple of {SUBSAMPLE_FACTOR}")
    if image.width < 2 * SUBSAMPLE_FACTOR:
        raise ImageTooNarrow(f"line {image.id!r} is {image.width}px wide; need 16")
    aug = aug or AugmentationSet.none()
    if aug.kind is AugKind.ALL:
        # geometry would break the frame correspondence
        raise ValueError("view pairs take visual augmentations only")
    rng = np.random.default_rng(seed)

    pixels = pad_width(image.pixels, max(crop_width, padded_width(image.width)))
    total = pixels.shape[1] // SUBSAMPLE_FACTOR
    frames = crop_width // SUBSAMPLE_FACTOR
    pos_a = int(rng.integers(0, total - frames + 1))
    if shift:
        lo = max(-(frames - 1), -pos_a)
        hi = min(frames - 1, total - frames - pos_a)
        shift_frames = int(rng.integers(lo, hi + 1))
    else:
        shift_frames = 0
    pos_b = pos_a + shift_frames

    def crop(pos: int) -> np.ndarray:
        x0 = pos * SUBSAMPLE_FACTOR
        return np.ascontiguousarray(pixels[:, x0 : x0 + crop_width])

    seed_a, seed_b = (int(s) for s in rng.integers(0, 2**31, 2))
    view_a = aug.apply(LineImage(image.id, crop(pos_a)), seed_a)
    view_b = aug.apply(LineImage(image.id, crop(pos_b)), seed_b)
    overlap = (max(0, shift_frames), min(frames, frames + shift_frames))
    return ViewPair(view_a, view_b, shift_frames, overlap, pos_a, pos_b)


__all__ = [
    "CropWidthError",
    "ImageTooNarrow",
    "AugmentationSet",
    "apply_visual",
    "apply_all",
    "ViewPair",
    "make_view_pair",
]
