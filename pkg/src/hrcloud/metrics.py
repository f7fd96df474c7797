"""Foreground-map evaluation: MAE, weighted F-beta and S-measure.

All three take a continuous cloud-probability map ``y`` in [0, 1] and a
binary ground truth ``t`` of the same shape.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from numba import njit
from scipy.ndimage import correlate

from .config import MetricConfig
from .tiling import TileGrid, stitch_tiles

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps


class UndefinedMeasureError(ValueError):
    pass


def _prepare(y, t):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t)
    if y.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {y.shape} vs label {t.shape}")
    return y, t > 0.5


def mean_absolute_error(y, t) -> float:
    y, t = _prepare(y, t)
    return float(np.mean(np.abs(y - t)))


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    """Normalized ``size`` x ``size`` Gaussian, centred like MATLAB's fspecial."""
    r = (size - 1) / 2.0
    ax = np.arange(size) - r
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


@njit(cache=True)
def _nearest_foreground(gt):
    h, w = gt.shape
    big = h * w + 1  # exceeds any row-major index, so distance dominates
    # column pass: nearest foreground row per (row, column), ties upward
    col_row = np.full((h, w), -1, np.int64)
    for b in range(w):
        last = -1
        for i in range(h):
            if gt[i, b]:
                last = i
            col_row[i, b] = last
        nxt = -1
        for i in range(h - 1, -1, -1):
            if gt[i, b]:
                nxt = i
            if nxt >= 0 and (col_row[i, b] < 0 or nxt - i < i - col_row[i, b]):
                col_row[i, b] = nxt
    rows = np.empty((h, w), np.int64)
    cols = np.empty((h, w), np.int64)
    sq = np.empty((h, w), np.int64)
    sites = np.empty(w, np.int64)
    starts = np.empty(w, np.int64)
    key = np.empty(w, np.int64)
    # row pass: lower envelope of big*(x - b)^2 + key[b], key breaks ties by (row, col)
    for i in range(h):
        n = 0
        for b in range(w):
            a = col_row[i, b]
            if a < 0:
                continue
            key[b] = big * (i - a) * (i - a) + a * w + b
            while n > 0:
                x, s = starts[n - 1], sites[n - 1]
                if big * (x - s) * (x - s) + key[s] > big * (x - b) * (x - b) + key[b]:
                    n -= 1
                else:
                    break
            if n == 0:
                sites[0] = b
                starts[0] = 0
                n = 1
            else:
                s = sites[n - 1]
                num = big * (b * b - s * s) + key[b] - key[s]
                sep = num // (2 * big * (b - s))
                if sep + 1 < w:
                    sites[n] = b
                    starts[n] = sep + 1
                    n += 1
        for x in range(w - 1, -1, -1):
            while starts[n - 1] > x:
                n -= 1
            b = sites[n - 1]
            a = col_row[i, b]
            rows[i, x] = a
            cols[i, x] = b
            sq[i, x] = (i - a) * (i - a) + (x - b) * (x - b)
    return sq, rows, cols


def nearest_foreground(gt: np.ndarray):
    """Euclidean distance to, and coordinates of, the nearest foreground pixel.

    Among equidistant foreground pixels the first in row-major order wins,
    which makes the result independent of the distance-transform algorithm.
    Requires at least one foreground pixel.
    """
    gt = np.ascontiguousarray(gt, dtype=np.bool_)
    h, w = gt.shape
    if (h * w + 1) * 4 * max(h, w) ** 2 >= 2**62:
        raise ValueError(f"{h}x{w} map too large for exact integer distance keys")
    sq, rows, cols = _nearest_foreground(gt)
    return np.sqrt(sq), rows, cols


def weighted_fbeta(y, t, beta2: float = 1.0, sigma: float = 5.0, kernel_size: int = 7, decay: float = 5.0) -> float:
    """Weighted F-beta of a foreground map.

    Background pixels inherit the error of their nearest foreground pixel
    before the Gaussian dependency filter; foreground errors are replaced by
    the filtered value where it is smaller; background errors are weighted by
    ``2 - exp(ln(0.5) / decay * distance_to_foreground)``.
    """
    y, gt = _prepare(y, t)
    if not gt.any():
        raise UndefinedMeasureError("weighted F-beta is undefined for an empty foreground")
    err = np.abs(y - gt)
    dist, near_r, near_c = nearest_foreground(gt)
    err_t = err[near_r, near_c]
    # zero padding outside the image
    err_a = correlate(err_t, gaussian_kernel(kernel_size, sigma), mode="constant", cval=0.0)
    min_e = np.where(gt & (err_a < err), err_a, err)
    weight = np.where(gt, 1.0, 2.0 - np.exp(math.log(0.5) / decay * dist))
    ew = min_e * weight
    tp_w = gt.sum() - ew[gt].sum()
    fp_w = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp_w / (tp_w + fp_w + EPS)
    return float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


def _object_score(values: np.ndarray) -> float:
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _s_object(y, gt) -> float:
    fg = _object_score(y[gt])
    bg = _object_score(1.0 - y[~gt])
    u = gt.mean()
    return u * fg + (1.0 - u) * bg


def _ssim(y, g) -> float:
    n = y.size
    mx, my = y.mean(), g.mean()
    vx = ((y - mx) ** 2).sum() / (n - 1 + EPS)
    vy = ((g - my) ** 2).sum() / (n - 1 + EPS)
    cxy = ((y - mx) * (g - my)).sum() / (n - 1 + EPS)
    a = 4.0 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(gt):
    """1-based centroid (x, y), rounded half away from zero."""
    rows, cols = np.nonzero(gt)
    cx = int(math.floor(cols.mean() + 0.5)) + 1
    cy = int(math.floor(rows.mean() + 0.5)) + 1
    return cx, cy


def _s_region(y, gt) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx), cx * cy),
        (slice(0, cy), slice(cx, w), (w - cx) * cy),
        (slice(cy, h), slice(0, cx), cx * (h - cy)),
        (slice(cy, h), slice(cx, w), (w - cx) * (h - cy)),
    ]
    score = 0.0
    for rs, cs, n in quads:
        if n == 0:
            continue
        score += n / area * _ssim(y[rs, cs], g[rs, cs])
    return score


def structure_measure(y, t, alpha: float = 0.5) -> float:
    """alpha * S_object + (1 - alpha) * S_region, clipped below at 0.

    An all-background label scores ``1 - mean(y)``; all-foreground ``mean(y)``.
    """
    y, gt = _prepare(y, t)
    frac = gt.mean()
    if frac == 0:
        return float(1.0 - y.mean())
    if frac == 1:
        return float(y.mean())
    score = alpha * _s_object(y, gt) + (1.0 - alpha) * _s_region(y, gt)
    return float(max(score, 0.0))


@dataclass
class SceneScores:
    scene_id: str
    e_ma: float
    f_beta_w: Optional[float]
    m_s: float


@dataclass
class EvalReport:
    scenes: List[SceneScores] = field(default_factory=list)
    constants: Dict[str, float] = field(default_factory=dict)

    @property
    def scene_count(self) -> int:
        return len(self.scenes)

    def means(self) -> Dict[str, float]:
        """Arithmetic means over scenes; F-beta skips scenes where it is undefined."""
        if not self.scenes:
            return {"e_ma": math.nan, "f_beta_w": math.nan, "m_s": math.nan}
        fb = [s.f_beta_w for s in self.scenes if s.f_beta_w is not None]
        return {
            "e_ma": float(np.mean([s.e_ma for s in self.scenes])),
            "f_beta_w": float(np.mean(fb)) if fb else math.nan,
            "m_s": float(np.mean([s.m_s for s in self.scenes])),
        }

    def to_dict(self) -> dict:
        return {
            "scenes": [asdict(s) for s in self.scenes],
            "mean": self.means(),
            "scene_count": self.scene_count,
            "constants": self.constants,
        }

    def table(self) -> str:
        lines = [f"{'scene':<24}{'e_ma(down)':>12}{'F_beta^w(up)':>14}{'m_s(up)':>10}"]

        def fmt(v):
            return f"{v:.4f}" if v is not None and not math.isnan(v) else "n/a"

        for s in self.scenes:
            lines.append(f"{s.scene_id:<24}{fmt(s.e_ma):>12}{fmt(s.f_beta_w):>14}{fmt(s.m_s):>10}")
        m = self.means()
        lines.append(f"{'mean':<24}{fmt(m['e_ma']):>12}{fmt(m['f_beta_w']):>14}{fmt(m['m_s']):>10}")
        return "\n".join(lines)


def report_constants(cfg: MetricConfig) -> Dict[str, float]:
    return {
        "beta2": cfg.beta2,
        "sigma": cfg.sigma,
        "kernel_size": cfg.kernel_size,
        "decay": cfg.decay,
        "alpha": cfg.alpha,
        "object_dispersion_constant": 1.0,
    }


def score_map(y, t, scene_id: str = "", cfg: MetricConfig = MetricConfig()) -> SceneScores:
    try:
        fb = weighted_fbeta(y, t, cfg.beta2, cfg.sigma, cfg.kernel_size, cfg.decay)
    except UndefinedMeasureError:
        warnings.warn(f"scene {scene_id!r}: empty foreground, weighted F-beta excluded")
        fb = None
    return SceneScores(scene_id, mean_absolute_error(y, t), fb, structure_measure(y, t, cfg.alpha))


def evaluate_scene(tiles, label, grid: TileGrid, scene_id: str = "", cfg: MetricConfig = MetricConfig()) -> SceneScores:
    """Stitch per-tile cloud-probability maps and score them against ``label``.

    Tiles may be (H, W) cloud maps or (2, H, W) probability maps.
    """
    maps = [np.asarray(getattr(t, "pixels", t)) for t in tiles]
    maps = [m[1] if m.ndim == 3 else m for m in maps]
    y = stitch_tiles(maps, grid)
    return score_map(y, label, scene_id, cfg)
