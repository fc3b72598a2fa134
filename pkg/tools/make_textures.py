"""Regenerate the bundled natural-texture fixtures from scikit-image sample data.

Every source image is CC0 or public domain (see the scikit-image docstrings).
"""
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image
from skimage.color import rgb2gray, rgba2rgb
from skimage.transform import resize

SOURCES = [
    "astronaut", "brick", "camera", "cell", "chelsea", "coffee", "coins", "grass",
    "gravel", "hubble_deep_field", "rocket", "horse", "text", "clock", "retina",
    "microaneurysms",
]
SIZE = 128
OUT = Path(__file__).resolve().parents[1] / "src" / "hand" / "data" / "textures"


def to_gray(img):
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] == 4:
        img = rgba2rgb(img)
    if img.ndim == 3:
        img = rgb2gray(img)
    img = img.astype(np.float64)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def center_square(img):
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name in SOURCES:
        img = center_square(to_gray(getattr(skimage.data, name)()))
        img = resize(img, (SIZE, SIZE), order=1, anti_aliasing=True)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(OUT / f"{name}.png")


if __name__ == "__main__":
    main()
