"""Teacher/student cross-entropy objective.

``y`` and ``y_aug`` are probability maps (N, 2, H, W); ``t`` is the one-hot
target of the same shape. With ``reduction="mean"`` both terms are divided
by the number of pixels N*H*W (the student term uses the same denominator,
not the count of confident entries).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_CLAMP = 1e-12


@dataclass
class ConfidenceMask:
    values: torch.Tensor  # same shape as y, {0, 1}, detached
    tau: float

    @property
    def masked_fraction(self) -> float:
        return float(self.values.mean())


@dataclass
class LossBreakdown:
    l_ce: torch.Tensor
    l_ce_aug: torch.Tensor
    total: torch.Tensor
    masked_fraction: float

    def as_record(self) -> dict:
        return {
            "l_ce": float(self.l_ce.detach()),
            "l_ce_aug": float(self.l_ce_aug.detach()),
            "total": float(self.total.detach()),
            "masked_fraction": self.masked_fraction,
        }


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce(per_entry, reduction):
    total = per_entry.sum()
    if reduction == "sum":
        return total
    # per_entry is (N, C, H, W); one pixel = one (n, h, w) position
    pixels = per_entry.numel() // per_entry.shape[1]
    return total / pixels


def cross_entropy_loss(y, t, reduction: str = "mean"):
    _check(y, t)
    return _reduce(-t * torch.log(y.clamp_min(LOG_CLAMP)), reduction)


def confidence_mask(y, tau: float) -> ConfidenceMask:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return ConfidenceMask((y.detach() > tau).to(y.dtype), tau)


def augmented_view_loss(y_aug, t, mask, reduction: str = "mean"):
    values = mask.values if isinstance(mask, ConfidenceMask) else mask
    _check(y_aug, t)
    _check(y_aug, values)
    return _reduce(-values.detach() * t * torch.log(y_aug.clamp_min(LOG_CLAMP)), reduction)


def total_loss(y, y_aug, t, tau=0.8, lambda1=0.1, lambda2=0.1, reduction: str = "mean") -> LossBreakdown:
    """lambda1 * CE(y, t) + lambda2 * masked CE(y_aug, t), mask = 1[y > tau].

    ``y_aug=None`` drops the student term (it is reported as zero).
    """
    l_ce = cross_entropy_loss(y, t, reduction)
    mask = confidence_mask(y, tau)
    if y_aug is None:
        l_aug = torch.zeros((), dtype=y.dtype)
        total = lambda1 * l_ce
    else:
        l_aug = augmented_view_loss(y_aug, t, mask, reduction)
        total = lambda1 * l_ce + lambda2 * l_aug
    return LossBreakdown(l_ce, l_aug, total, mask.masked_fraction)
