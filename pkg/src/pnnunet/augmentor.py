"""Elastic deformation and horizontal flips applied jointly to image and mask."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, ShapeError
from .volumedata import Rng

# classic MNIST-scale parameters, rescaled by slice width / 28
BASE_ALPHA = 34.0
BASE_SIGMA = 4.0
BASE_WIDTH = 28
FLIP_P = 0.25


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class ElasticParams:
    alpha: float
    sigma: float

    def __post_init__(self):
        if self.alpha < 0 or self.sigma <= 0:
            raise ConfigError(f"need alpha >= 0 and sigma > 0, got {self}")

    @classmethod
    def for_width(cls, width: int) -> "ElasticParams":
        f = width / BASE_WIDTH
        return cls(BASE_ALPHA * f, BASE_SIGMA * f)


@dataclass(frozen=True)
class AugmentPolicy:
    flip_probability: float = 0.0
    elastic: ElasticParams | None = None
    split: Split = Split.TEST

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip probability must lie in [0, 1], got {self.flip_probability}")

    @classmethod
    def for_split(cls, split: Split, width: int = 64, p: float = FLIP_P,
                  elastic: ElasticParams | None = None) -> "AugmentPolicy":
        """Train: flips and elastic warps. Val: flips only. Test: nothing."""
        if split is Split.TRAIN:
            return cls(p, elastic or ElasticParams.for_width(width), split)
        if split is Split.VAL:
            return cls(p, None, split)
        return cls(0.0, None, split)

    @property
    def is_identity(self) -> bool:
        return self.flip_probability == 0.0 and self.elastic is None


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian smoothing with edge replication."""
    k = gaussian_kernel(sigma)
    out = correlate1d(field, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def make_displacement(extents: tuple[int, int], alpha: float, sigma: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed uniform(-1, 1) noise scaled by ``alpha``; returns (dy, dz)."""
    ElasticParams(alpha, sigma)
    noise = rng.uniform_array((2, *extents)) * 2.0 - 1.0
    dy = smooth(noise[0], sigma) * alpha
    dz = smooth(noise[1], sigma) * alpha
    return dy, dz


def _gather(img: np.ndarray, yi: np.ndarray, zi: np.ndarray) -> np.ndarray:
    h, w = img.shape
    inside = (yi >= 0) & (yi < h) & (zi >= 0) & (zi < w)
    out = np.zeros(yi.shape, dtype=img.dtype)
    out[inside] = img[yi[inside], zi[inside]]
    return out


def elastic_deform(image: np.ndarray, mask: np.ndarray, field: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Resample at (y + dy, z + dz): bilinear for the image, nearest for the mask.

    Samples falling outside the slice read as zero.
    """
    dy, dz = field
    if image.shape != mask.shape or dy.shape != image.shape or dz.shape != image.shape:
        raise ShapeError("image, mask and displacement field must share a shape")
    h, w = image.shape
    gy, gz = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy, sz = gy + dy, gz + dz

    y0 = np.floor(sy).astype(np.int64)
    z0 = np.floor(sz).astype(np.int64)
    fy, fz = sy - y0, sz - z0
    img = image.astype(np.float64, copy=False)
    warped = ((1 - fy) * (1 - fz) * _gather(img, y0, z0) + (1 - fy) * fz * _gather(img, y0, z0 + 1)
              + fy * (1 - fz) * _gather(img, y0 + 1, z0) + fy * fz * _gather(img, y0 + 1, z0 + 1))

    ny = np.floor(sy + 0.5).astype(np.int64)
    nz = np.floor(sz + 0.5).astype(np.int64)
    return warped.astype(image.dtype, copy=False), _gather(mask, ny, nz)


def horizontal_flip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror the last (sagittal) axis of both arrays."""
    return image[..., ::-1].copy(), mask[..., ::-1].copy()


def apply_policy(pair: tuple[np.ndarray, np.ndarray], policy: AugmentPolicy, rng: Rng,
                 flip: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Augment one image/mask slice pair.

    One uniform is drawn for the flip decision (unless ``flip`` is given by
    the caller), then, under an elastic policy, a fresh displacement field.
    The warp is applied before the flip.
    """
    image, mask = pair
    if policy.is_identity:
        return image, mask
    if flip is None:
        flip = rng.uniform() < policy.flip_probability
    if policy.elastic is not None:
        field = make_displacement(image.shape, policy.elastic.alpha, policy.elastic.sigma, rng)
        image, mask = elastic_deform(image, mask, field)
    if flip:
        image, mask = horizontal_flip(image, mask)
    return image, mask


def augment_volume(images: np.ndarray, masks: np.ndarray, policy: AugmentPolicy, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Augment an (X, H, W) stack: one flip decision per volume, one field per slice."""
    if policy.is_identity:
        return images, masks
    flip = rng.uniform() < policy.flip_probability
    out = [apply_policy((im, mk), policy, rng, flip=flip) for im, mk in zip(images, masks)]
    return np.stack([a for a, _ in out]), np.stack([b for _, b in out])
