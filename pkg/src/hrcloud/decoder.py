"""Decoder: cascaded fusion, branch aggregation, pyramid pooling and head."""
from __future__ import annotations

from typing import List, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import ShapeError, upsample
from .config import BackboneConfig, DecoderConfig


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, cfg: BackboneConfig):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout, momentum=cfg.bn_momentum, eps=cfg.bn_eps),
            nn.ReLU(),
        )


class CascadeFuse(nn.Module):
    """f_k = ConvBlock(ConvBlock([F_k, up2(f_{k+1})])), width of F_k."""

    def __init__(self, width, lower_width, cfg: BackboneConfig):
        super().__init__()
        self.blocks = nn.Sequential(ConvBlock(width + lower_width, width, cfg), ConvBlock(width, width, cfg))

    def forward(self, skip, lower):
        h, w = skip.shape[-2:]
        if tuple(lower.shape[-2:]) != (h // 2, w // 2):
            raise ShapeError(
                f"lower map {tuple(lower.shape[-2:])} is not one level below {(h, w)}"
            )
        return self.blocks(torch.cat([skip, upsample(lower, (h, w))], dim=1))


class CascadedFusion(nn.Module):
    def __init__(self, widths: Sequence[int], cfg: BackboneConfig):
        super().__init__()
        # steps[i] fuses level i with level i+1
        self.steps = nn.ModuleList([CascadeFuse(widths[i], widths[i + 1], cfg) for i in range(len(widths) - 1)])

    def forward(self, feats: List[torch.Tensor]) -> List[torch.Tensor]:
        out = [None] * len(feats)
        out[-1] = feats[-1]
        for i in range(len(feats) - 2, -1, -1):
            out[i] = self.steps[i](feats[i], out[i + 1])
        return out


def aggregate_branches(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Upsample every map to the first one's size and concatenate in order."""
    if not maps or any(m is None for m in maps):
        raise ValueError("aggregate_branches needs every branch map")
    size = maps[0].shape[-2:]
    return torch.cat([maps[0]] + [upsample(m, size) for m in maps[1:]], dim=1)


class PyramidPooling(nn.Module):
    """Adaptive average pooling per bin, 1x1 conv to C//4, upsample, concat.

    Narrow maps (C < 4) keep one pooled channel per bin so that every
    ablation variant of a width-2 network still builds.
    """

    def __init__(self, channels, bins=(1, 2, 3, 6)):
        super().__init__()
        self.bins = tuple(bins)
        if channels < 1:
            raise ValueError(f"pyramid pooling needs input channels, got {channels}")
        self.reduced = max(1, channels // 4)
        self.convs = nn.ModuleList([nn.Conv2d(channels, self.reduced, 1, bias=False) for _ in self.bins])
        self.out_channels = channels + len(self.bins) * self.reduced

    def forward(self, x):
        size = x.shape[-2:]
        pooled = [upsample(conv(F.adaptive_avg_pool2d(x, b)), size) for b, conv in zip(self.bins, self.convs)]
        return torch.cat([x] + pooled, dim=1)


class ClassifierHead(nn.Module):
    """ConvBlock -> 1x1 conv to two logits (background, cloud)."""

    def __init__(self, channels, head_channels, cfg: BackboneConfig):
        super().__init__()
        self.block = ConvBlock(channels, head_channels, cfg)
        self.classifier = nn.Conv2d(head_channels, 2, 1)

    def forward(self, x):
        return self.classifier(self.block(x))


def logits_to_probs(logits: torch.Tensor, size=None) -> torch.Tensor:
    """Upsample 2-channel logits to ``size`` then softmax over channels."""
    if size is not None:
        logits = upsample(logits, size)
    return torch.softmax(logits, dim=1)


class Decoder(nn.Module):
    def __init__(
        self,
        widths: Sequence[int],
        cfg: BackboneConfig,
        dcfg: DecoderConfig,
        cascaded_fusion: bool = True,
        pyramid_pooling: bool = True,
    ):
        super().__init__()
        self.cascade = CascadedFusion(widths, cfg) if cascaded_fusion and len(widths) > 1 else None
        channels = sum(widths)
        self.ppm = PyramidPooling(channels, dcfg.pyramid_bins) if pyramid_pooling else None
        if self.ppm is not None:
            channels = self.ppm.out_channels
        self.head = ClassifierHead(channels, dcfg.head_channels, cfg)

    def forward(self, feats: List[torch.Tensor]) -> torch.Tensor:
        """Logits at the resolution of the first (highest-resolution) map."""
        if self.cascade is not None:
            feats = self.cascade(feats)
        x = aggregate_branches(feats)
        if self.ppm is not None:
            x = self.ppm(x)
        return self.head(x)
