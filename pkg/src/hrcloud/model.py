"""Full network assembly and ablation variants."""
from __future__ import annotations

import math

import torch
from torch import nn

from .backbone import HRBackbone
from .config import AblationFlags, BackboneConfig, DecoderConfig
from .decoder import Decoder, logits_to_probs


class HRCloudNet(nn.Module):
    """Image batch (N, 3, H, W) in [0, 1] -> (N, 2, H, W) class probabilities."""

    def __init__(self, backbone: BackboneConfig, decoder: DecoderConfig, flags: AblationFlags = AblationFlags()):
        super().__init__()
        self.backbone_cfg, self.decoder_cfg, self.flags = backbone, decoder, flags
        self.backbone = HRBackbone(backbone, multi_resolution=flags.use_multi_resolution)
        self.decoder = Decoder(
            self.backbone.out_widths,
            backbone,
            decoder,
            cascaded_fusion=flags.use_cascaded_fusion,
            pyramid_pooling=flags.use_pyramid_pooling,
        )

    def forward_logits(self, x):
        """Logits at 1/4 resolution."""
        return self.decoder(self.backbone(x))

    def forward(self, x):
        return logits_to_probs(self.forward_logits(x), x.shape[-2:])


def init_weights(model: nn.Module, generator: torch.Generator | None = None) -> None:
    """He-normal conv kernels (fan-out, ReLU gain); BN scale 1, shift 0."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(
    flags: AblationFlags,
    backbone: BackboneConfig,
    decoder: DecoderConfig,
    tile_size: int | None = None,
    seed: int | None = 0,
) -> HRCloudNet:
    if tile_size is not None:
        if tile_size % 32:
            raise ValueError(f"tile_size {tile_size} is not divisible by 32")
        side = tile_size // 4
        if flags.use_pyramid_pooling and max(decoder.pyramid_bins) > side:
            raise ValueError(f"pyramid bin {max(decoder.pyramid_bins)} exceeds the {side}x{side} aggregated map")
    model = HRCloudNet(backbone, decoder, flags)
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    init_weights(model, gen)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
