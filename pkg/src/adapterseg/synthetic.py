"""Synthetic camouflage-style fixtures: low-contrast ellipses on textured noise."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image
from scipy import ndimage


def _texture(rng: np.random.Generator, res: int, sigma: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((res, res, 3)), sigma=(sigma, sigma, 0))
    return t / (t.std() + 1e-12)


def camouflage_sample(rng: np.random.Generator, res: int = 64,
                      contrast: float = 0.12) -> tuple[np.ndarray, np.ndarray]:
    """One (uint8 [H, W, 3] image, uint8 {0,1} [H, W] mask) pair.

    Foreground and background share a base colour; the object differs by a small
    colour offset and a finer texture grain.
    """
    base = rng.uniform(0.3, 0.7, size=3)
    offset = rng.normal(size=3)
    offset *= contrast / np.linalg.norm(offset)
    bg = base + 0.08 * _texture(rng, res, sigma=2.5)
    fg = base + offset + 0.08 * _texture(rng, res, sigma=1.0)

    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    cy, cx = rng.uniform(0.3, 0.7, size=2) * res
    ry, rx = rng.uniform(0.15, 0.3, size=2) * res
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)

    img = np.where(mask[..., None] == 1, fg, bg)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255).round().astype(np.uint8), mask


def write_toy_dataset(root: Union[str, Path], n: int = 8, res: int = 64, seed: int = 0,
                      split: str = "train", contrast: float = 0.12) -> Path:
    """Write ``n`` samples as root/<split>/images/*.png and root/<split>/masks/*.png."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    img_dir = root / split / "images"
    mask_dir = root / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img, mask = camouflage_sample(rng, res, contrast)
        Image.fromarray(img).save(img_dir / f"toy_{i:03d}.png")
        Image.fromarray(mask * 255).save(mask_dir / f"toy_{i:03d}.png")
    return root
