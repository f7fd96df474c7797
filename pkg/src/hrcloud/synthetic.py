"""Seeded synthetic cloud scenes for smoke runs and tests.

Ground is smooth colored noise; clouds are thresholded blob fields rendered
bright and slightly textured, with soft edges. The label is exactly the
thresholded field.
"""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import write_image, write_manifest, write_mask


def _smooth_noise(rng, shape, sigma):
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def make_scene(height: int, width: int, rng: np.random.Generator, cloud_fraction: float = 0.4) -> Tuple[np.ndarray, np.ndarray]:
    """(H, W, 3) float32 image in [0, 1] and (H, W) uint8 cloud mask."""
    scale = max(2.0, min(height, width) / 8)
    ground = np.stack([_smooth_noise(rng, (height, width), scale / 2) for _ in range(3)], axis=-1)
    ground = 0.08 + 0.35 * ground * np.array([0.7, 0.9, 0.6])
    field = _smooth_noise(rng, (height, width), scale)
    cut = np.quantile(field, 1.0 - cloud_fraction)
    mask = (field > cut).astype(np.uint8)
    texture = 0.05 * _smooth_noise(rng, (height, width), 1.5)
    alpha = np.clip((field - cut) / 0.05, 0.0, 1.0) * mask
    cloud = (0.88 + texture)[..., None] * np.ones(3)
    image = ground * (1 - alpha[..., None]) + cloud * alpha[..., None]
    return np.clip(image, 0, 1).astype(np.float32), mask


def write_dataset(root, n_train: int = 4, n_test: int = 2, size: Tuple[int, int] = (64, 64), seed: int = 0) -> Path:
    """Write PNG scenes, masks and a ``manifest.jsonl`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        image, mask = make_scene(size[0], size[1], rng)
        sid = f"{split}{i:03d}"
        write_image(root / "images" / f"{sid}.png", image)
        write_mask(root / "masks" / f"{sid}.png", mask)
        entries.append((f"images/{sid}.png", f"masks/{sid}.png", split))
    path = root / "manifest.jsonl"
    write_manifest(path, entries)
    return path
