"""Synthetic out-of-distribution samples for self-supervised training.

About half of the in-distribution images in a batch are replaced by a
randomly transformed copy and labelled 1; the rest stay untouched with
label 0. Pixel-sized parameters (disk radii, median kernel) are absolute
and do not scale with the image side.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import median_filter

from .preprocess import resize_bilinear


class TransformKind(enum.Enum):
    COLOR_JITTER = "ColorJitter"
    INVERT = "Invert"
    MEDIAN_FILTER = "MedianFilter"
    ROUND_MASK = "RoundMask"
    NATURAL_MASK = "NaturalMask"
    GAUSSIAN_NOISE = "GaussianNoise"


TRANSFORM_KINDS = tuple(TransformKind)


@dataclass(frozen=True)
class SynthConfig:
    ood_probability: float = 0.5
    exact_half_batches: bool = False
    brightness_shift: float = 0.3
    contrast_range: tuple[float, float] = (0.5, 1.5)
    median_kernel: int = 9
    disk_count: tuple[int, int] = (1, 3)
    disk_radius: tuple[float, float] = (8.0, 48.0)
    disk_fill: float = 1.0
    natural_patch_fraction: tuple[float, float] = (0.15, 0.4)
    natural_alpha: tuple[float, float] = (0.6, 1.0)
    noise_sigma: tuple[float, float] = (0.05, 0.2)
    texture_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.ood_probability <= 1.0:
            raise ValueError(f"ood_probability must be in [0, 1], got {self.ood_probability}")
        if self.median_kernel < 1:
            raise ValueError("median_kernel must be positive")


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: int
    transform: TransformKind | None = None

    def __post_init__(self):
        if (self.label == 1) != (self.transform is not None):
            raise ValueError("label 1 requires a transform and label 0 forbids one")


@lru_cache(maxsize=8)
def load_textures(texture_dir: str | None = None) -> tuple[np.ndarray, ...]:
    """Grayscale textures in [0, 1]; defaults to the bundled fixtures."""
    if texture_dir is None:
        root = resources.files("hand") / "data" / "textures"
        paths = sorted((p for p in root.iterdir() if p.name.endswith(".png")), key=lambda p: p.name)
    else:
        paths = sorted(Path(texture_dir).glob("*.png"))
    textures = []
    for p in paths:
        with p.open("rb") as fh, Image.open(fh) as img:
            textures.append(np.asarray(img.convert("L"), dtype=np.float64) / 255.0)
    if not textures:
        raise FileNotFoundError(f"no texture PNGs found in {texture_dir or 'bundled fixtures'}")
    return tuple(textures)


def sample_disks(rng: np.random.Generator, shape: tuple[int, int], cfg: SynthConfig):
    """Draw (row, col, radius) disks lying fully inside the image."""
    h, w = shape
    n = int(rng.integers(cfg.disk_count[0], cfg.disk_count[1] + 1))
    disks = []
    for _ in range(n):
        r = float(rng.uniform(*cfg.disk_radius))
        r = min(r, (min(h, w) - 1) / 2)
        cy = float(rng.uniform(r, h - 1 - r))
        cx = float(rng.uniform(r, w - 1 - r))
        disks.append((cy, cx, r))
    return disks


def disk_mask(shape: tuple[int, int], disks) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    mask = np.zeros(shape, dtype=bool)
    for cy, cx, r in disks:
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask


def _color_jitter(img, rng, cfg):
    shift = rng.uniform(-cfg.brightness_shift, cfg.brightness_shift)
    contrast = rng.uniform(*cfg.contrast_range)
    mean = img.mean()
    return (img - mean) * contrast + mean + shift


def _natural_mask(img, rng, cfg):
    textures = load_textures(cfg.texture_dir)
    tex = textures[int(rng.integers(len(textures)))]
    h, w = img.shape
    ph = max(1, int(round(rng.uniform(*cfg.natural_patch_fraction) * h)))
    pw = max(1, int(round(rng.uniform(*cfg.natural_patch_fraction) * w)))
    if tex.shape[0] < ph or tex.shape[1] < pw:
        tex = resize_bilinear(tex, (max(ph, tex.shape[0]), max(pw, tex.shape[1])))
    ty = int(rng.integers(tex.shape[0] - ph + 1))
    tx = int(rng.integers(tex.shape[1] - pw + 1))
    patch = tex[ty:ty + ph, tx:tx + pw]
    y = int(rng.integers(h - ph + 1))
    x = int(rng.integers(w - pw + 1))
    alpha = rng.uniform(*cfg.natural_alpha)
    out = img.copy()
    out[y:y + ph, x:x + pw] = (1 - alpha) * out[y:y + ph, x:x + pw] + alpha * patch
    return out


def apply_transform(
    image: np.ndarray,
    kind: TransformKind,
    rng: np.random.Generator,
    cfg: SynthConfig = SynthConfig(),
) -> np.ndarray:
    """Apply one synthetic-OOD transform and clamp the result to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if kind is TransformKind.COLOR_JITTER:
        out = _color_jitter(img, rng, cfg)
    elif kind is TransformKind.INVERT:
        out = 1.0 - img
    elif kind is TransformKind.MEDIAN_FILTER:
        out = median_filter(img, size=cfg.median_kernel, mode="reflect")
    elif kind is TransformKind.ROUND_MASK:
        out = img.copy()
        out[disk_mask(img.shape, sample_disks(rng, img.shape, cfg))] = cfg.disk_fill
    elif kind is TransformKind.NATURAL_MASK:
        out = _natural_mask(img, rng, cfg)
    elif kind is TransformKind.GAUSSIAN_NOISE:
        sigma = rng.uniform(*cfg.noise_sigma)
        out = img + rng.normal(0.0, sigma, size=img.shape)
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return np.clip(out, 0.0, 1.0)


def make_training_batch(
    id_images: Sequence[np.ndarray],
    rng: np.random.Generator,
    cfg: SynthConfig = SynthConfig(),
) -> list[SyntheticSample]:
    """Label each image ID (0) or synthetic OOD (1), transforming the latter.

    By default each image is picked independently with ``cfg.ood_probability``;
    with ``cfg.exact_half_batches`` exactly ``len // 2`` images are picked.
    """
    n = len(id_images)
    if n == 0:
        raise ValueError("make_training_batch needs at least one image")
    if cfg.exact_half_batches:
        picked = np.zeros(n, dtype=bool)
        picked[rng.permutation(n)[: n // 2]] = True
    else:
        picked = rng.random(n) < cfg.ood_probability
    samples = []
    for img, is_ood in zip(id_images, picked):
        if is_ood:
            kind = TRANSFORM_KINDS[int(rng.integers(len(TRANSFORM_KINDS)))]
            samples.append(SyntheticSample(apply_transform(img, kind, rng, cfg), 1, kind))
        else:
            samples.append(SyntheticSample(np.asarray(img, dtype=np.float64), 0, None))
    return samples


def spawn_streams(master_seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-worker generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(n)]
