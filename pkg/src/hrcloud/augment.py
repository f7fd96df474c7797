"""Photometric strong augmentation for the student view.

Transforms run in a fixed order (color jitter, grayscale, blur) and never
touch geometry, so a label mask aligned with the input stays aligned with the
output. Randomness is drawn once into an :class:`AugmentationTrace`; applying
a trace is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.color import hsv2rgb, rgb2hsv

from .config import AugmentationConfig

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class AugmentationTrace:
    jitter: Optional[Tuple[float, float, float, float]]  # brightness, contrast, saturation, hue
    grayscale: bool
    blur_sigma: Optional[float]

    @property
    def fired(self) -> dict:
        return {
            "color_jitter": self.jitter is not None,
            "grayscale": self.grayscale,
            "blur": self.blur_sigma is not None,
        }


def sample_trace(config: AugmentationConfig, rng: np.random.Generator) -> AugmentationTrace:
    jitter = None
    # every draw is consumed whether or not a transform fires, so the stream
    # position after a call does not depend on outcomes
    u_jit, u_gray, u_blur = rng.random(3)
    b, c, s, h, sigma = rng.random(5)
    if u_jit < config.p_color_jitter:
        jitter = (
            1.0 + config.brightness * (2 * b - 1),
            1.0 + config.contrast * (2 * c - 1),
            1.0 + config.saturation * (2 * s - 1),
            config.hue * (2 * h - 1),
        )
    blur = None
    if u_blur < config.p_blur:
        lo, hi = config.blur_sigma
        blur = lo + (hi - lo) * sigma
    return AugmentationTrace(jitter, bool(u_gray < config.p_grayscale), blur)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def _blend(img, other, factor):
    return np.clip(factor * img + (1.0 - factor) * other, 0.0, 1.0)


def _adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    if shift == 0.0:
        return img
    hsv = rgb2hsv(img)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv2rgb(hsv)


def apply_trace(image: np.ndarray, trace: AugmentationTrace) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    if trace.jitter is not None:
        bright, contrast, sat, hue = trace.jitter
        out = _blend(out, 0.0, bright)
        out = _blend(out, _gray(out).mean(), contrast)
        out = _blend(out, _gray(out)[..., None], sat)
        out = _adjust_hue(out, hue)
    if trace.grayscale:
        out = np.repeat(_gray(out)[..., None], 3, axis=-1)
    if trace.blur_sigma is not None:
        out = gaussian_filter(out, sigma=(trace.blur_sigma, trace.blur_sigma, 0), mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def augment(image: np.ndarray, config: AugmentationConfig, rng) -> Tuple[np.ndarray, AugmentationTrace]:
    """Strongly augment an (H, W, 3) image in [0, 1].

    ``rng`` is a :class:`numpy.random.Generator` or anything accepted by
    :func:`numpy.random.default_rng` (e.g. an integer seed).
    """
    rng = np.random.default_rng(rng)
    trace = sample_trace(config, rng)
    return apply_trace(image, trace), trace


def make_view_pair(image: np.ndarray, config: AugmentationConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher view (the image itself) and student view (its augmentation)."""
    augmented, _ = augment(image, config, rng)
    return image, augmented
