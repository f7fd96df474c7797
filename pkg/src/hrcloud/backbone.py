"""High-resolution representation encoder.

Stem (two stride-2 3x3 convs) -> stage 1 (bottleneck units on one 1/4 branch)
-> stages 2-4 (one residual block per branch, then cross-resolution fusion),
with a transition after stages 1-3 spawning the next lower-resolution branch.
The output is the list of stage-4 branch maps, highest resolution first.
"""
from __future__ import annotations

from typing import List

import torch
from torch import nn
from torch.nn import functional as F

from .config import BackboneConfig

NUM_LEVELS = 4


class ShapeError(ValueError):
    pass


def _bn(ch, cfg: BackboneConfig):
    return nn.BatchNorm2d(ch, momentum=cfg.bn_momentum, eps=cfg.bn_eps)


def _conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class Stem(nn.Module):
    """Two stride-2 3x3 conv+BN+ReLU layers: input -> 1/4 resolution."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 3):
        super().__init__()
        w = cfg.stem_width
        self.conv1, self.bn1 = _conv3x3(in_channels, w, 2), _bn(w, cfg)
        self.conv2, self.bn2 = _conv3x3(w, w, 2), _bn(w, cfg)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input sides must be divisible by 32, got {h}x{w}")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, cfg: BackboneConfig):
        super().__init__()
        cout = planes * self.expansion
        self.conv1, self.bn1 = nn.Conv2d(cin, planes, 1, bias=False), _bn(planes, cfg)
        self.conv2, self.bn2 = _conv3x3(planes, planes), _bn(planes, cfg)
        self.conv3, self.bn3 = nn.Conv2d(planes, cout, 1, bias=False), _bn(cout, cfg)
        self.downsample = None
        if cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), _bn(cout, cfg))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.downsample is None else self.downsample(x)
        return F.relu(out + skip)


class ResidualUnit(nn.Module):
    """x + BN(conv(ReLU(BN(conv(x))))); no activation after the sum."""

    def __init__(self, channels, cfg: BackboneConfig):
        super().__init__()
        self.conv1, self.bn1 = _conv3x3(channels, channels), _bn(channels, cfg)
        self.conv2, self.bn2 = _conv3x3(channels, channels), _bn(channels, cfg)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(out))


class BasicBlock(nn.Module):
    """``units`` residual units composed sequentially on one branch."""

    def __init__(self, channels, units, cfg: BackboneConfig):
        super().__init__()
        self.channels = channels
        self.units = nn.Sequential(*[ResidualUnit(channels, cfg) for _ in range(units)])

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"block expects {self.channels} channels, got {x.shape[1]}")
        return self.units(x)


class FuseLayer(nn.Module):
    """Output k = ReLU(sum_j T_{j->k}(H_j)) over all branches.

    Lower-to-higher transforms are 1x1 conv + BN + bilinear upsampling;
    higher-to-lower transforms chain one stride-2 3x3 conv + BN per halving
    (ReLU between links, not after the last).
    """

    def __init__(self, widths, cfg: BackboneConfig):
        super().__init__()
        self.widths = tuple(widths)
        n = len(widths)
        self.transforms = nn.ModuleList()
        for k in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j == k:
                    row.append(nn.Identity())
                elif j > k:
                    row.append(nn.Sequential(nn.Conv2d(widths[j], widths[k], 1, bias=False), _bn(widths[k], cfg)))
                else:
                    links = []
                    for step in range(k - j):
                        last = step == k - j - 1
                        cout = widths[k] if last else widths[j]
                        links += [_conv3x3(widths[j], cout, 2), _bn(cout, cfg)]
                        if not last:
                            links.append(nn.ReLU())
                    row.append(nn.Sequential(*links))
            self.transforms.append(row)

    def forward(self, branches: List[torch.Tensor]) -> List[torch.Tensor]:
        if len(branches) != len(self.widths):
            raise ShapeError(f"fusion built for {len(self.widths)} branches, got {len(branches)}")
        outs = []
        for k, row in enumerate(self.transforms):
            size = branches[k].shape[-2:]
            acc = branches[k]
            for j, t in enumerate(row):
                if j == k:
                    continue
                y = t(branches[j])
                if j > k:
                    y = upsample(y, size)
                acc = acc + y
            outs.append(F.relu(acc))
        return outs


class Transition(nn.Module):
    """Spawn the next lower-resolution branch from the lowest current one."""

    def __init__(self, cin, cout, cfg: BackboneConfig, level: int):
        super().__init__()
        if not transition_allowed(level):
            raise ValueError(f"no transition after stage 4 (input level {level} is already 1/32)")
        self.level = level  # level of the input branch, 0-based
        self.conv, self.bn = _conv3x3(cin, cout, 2), _bn(cout, cfg)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def transition_allowed(level: int) -> bool:
    return 0 <= level < NUM_LEVELS - 1


class StageModule(nn.Module):
    def __init__(self, widths, units, cfg: BackboneConfig):
        super().__init__()
        self.blocks = nn.ModuleList([BasicBlock(w, units, cfg) for w in widths])
        self.fuse = FuseLayer(widths, cfg)

    def forward(self, branches):
        return self.fuse([b(x) for b, x in zip(self.blocks, branches)])


class HRBackbone(nn.Module):
    """Returns [F1, F2, F3, F4] (or [F1] when ``multi_resolution`` is off)."""

    def __init__(self, cfg: BackboneConfig, multi_resolution: bool = True):
        super().__init__()
        self.cfg = cfg
        self.multi_resolution = multi_resolution
        widths = cfg.widths
        self.stem = Stem(cfg)
        planes = cfg.stem_width
        units = []
        cin = cfg.stem_width
        for _ in range(cfg.bottleneck_units):
            units.append(Bottleneck(cin, planes, cfg))
            cin = planes * Bottleneck.expansion
        self.stage1 = nn.Sequential(*units)
        self.stage1_proj = nn.Sequential(_conv3x3(cin, widths[0]), _bn(widths[0], cfg), nn.ReLU())

        self.transitions = nn.ModuleList()
        self.stages = nn.ModuleList()
        for s in range(1, NUM_LEVELS):
            n = s + 1 if multi_resolution else 1
            if multi_resolution:
                self.transitions.append(Transition(widths[s - 1], widths[s], cfg, level=s - 1))
            self.stages.append(nn.Sequential(*[
                StageModule(widths[:n], cfg.block_units, cfg) for _ in range(cfg.modules_per_stage)
            ]))

    @property
    def out_widths(self):
        return self.cfg.widths if self.multi_resolution else self.cfg.widths[:1]

    def forward(self, x) -> List[torch.Tensor]:
        branches = [self.stage1_proj(self.stage1(self.stem(x)))]
        for s, stage in enumerate(self.stages):
            if self.multi_resolution:
                branches = branches + [self.transitions[s](branches[-1])]
            for module in stage:
                branches = module(branches)
        return branches
