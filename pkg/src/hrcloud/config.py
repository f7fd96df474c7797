"""Configuration models.

Every knob of the toolkit lives in one document (:class:`RunConfig`). The
defaults reproduce the full-scale training recipe; ``configs/desk.yaml`` is a
CPU-sized variant.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Strict):
    base_width: int = Field(18, ge=1)
    stem_width: int = Field(64, ge=1)
    bottleneck_units: int = Field(4, ge=1)
    block_units: int = Field(4, ge=1)
    modules_per_stage: int = Field(1, ge=1)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)

    @property
    def widths(self) -> Tuple[int, int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w)


class DecoderConfig(_Strict):
    pyramid_bins: Tuple[int, ...] = (1, 2, 3, 6)
    head_channels: int = Field(64, ge=1)

    @field_validator("pyramid_bins")
    @classmethod
    def _increasing(cls, bins):
        if not bins or any(b < 1 for b in bins):
            raise ValueError("pyramid bins must be positive")
        if any(b >= c for b, c in zip(bins, bins[1:])):
            raise ValueError("pyramid bins must be strictly increasing")
        return bins


class AblationFlags(_Strict):
    use_cascaded_fusion: bool = True
    use_pyramid_pooling: bool = True
    use_multi_resolution: bool = True
    use_aug_view_loss: bool = True


class AugmentationConfig(_Strict):
    p_color_jitter: float = Field(0.8, ge=0, le=1)
    p_grayscale: float = Field(0.2, ge=0, le=1)
    p_blur: float = Field(0.5, ge=0, le=1)
    brightness: float = Field(0.4, ge=0)
    contrast: float = Field(0.4, ge=0)
    saturation: float = Field(0.4, ge=0)
    hue: float = Field(0.1, ge=0, le=0.5)
    blur_sigma: Tuple[float, float] = (0.1, 2.0)

    @field_validator("blur_sigma")
    @classmethod
    def _sigma_range(cls, v):
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError("blur_sigma must be (lo, hi) with 0 < lo <= hi")
        return v


class OptimizerConfig(_Strict):
    learning_rate: float = Field(5e-5, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(8, ge=1)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    decoupled_weight_decay: bool = True
    max_steps: Optional[int] = Field(None, ge=0)


class LossConfig(_Strict):
    tau: float = Field(0.8, ge=0, le=1)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(0.1, ge=0)
    reduction: Literal["mean", "sum"] = "mean"


class MetricConfig(_Strict):
    beta2: float = Field(1.0, gt=0)
    sigma: float = Field(5.0, gt=0)
    kernel_size: int = Field(7, ge=1)
    decay: float = Field(5.0, gt=0)
    alpha: float = Field(0.5, ge=0, le=1)


class DataConfig(_Strict):
    manifest: Optional[str] = None
    tile_size: int = Field(352, ge=32)

    @field_validator("tile_size")
    @classmethod
    def _divisible(cls, v):
        if v % 32:
            raise ValueError("tile_size must be divisible by 32")
        return v


class SweepConfig(_Strict):
    lambda1: Tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 1.0)
    lambda2: Tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 1.0)


class RunConfig(_Strict):
    name: str = "hrcloud"
    seed: int = 0
    deterministic: bool = True
    data: DataConfig = DataConfig()
    backbone: BackboneConfig = BackboneConfig()
    decoder: DecoderConfig = DecoderConfig()
    flags: AblationFlags = AblationFlags()
    augmentation: AugmentationConfig = AugmentationConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    loss: LossConfig = LossConfig()
    metrics: MetricConfig = MetricConfig()
    sweep: SweepConfig = SweepConfig()
    checkpoint_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _bins_fit_map(self):
        if self.flags.use_pyramid_pooling:
            side = self.data.tile_size // 4
            if max(self.decoder.pyramid_bins) > side:
                raise ValueError(
                    f"decoder.pyramid_bins: bin {max(self.decoder.pyramid_bins)} exceeds "
                    f"the {side}x{side} aggregated map of a {self.data.tile_size} tile"
                )
        return self

    def fingerprint(self) -> str:
        """Hash of the parts that determine the parameter layout."""
        arch = {
            "backbone": self.backbone.model_dump(mode="json"),
            "decoder": self.decoder.model_dump(mode="json"),
            "flags": self.flags.model_dump(mode="json"),
        }
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML or JSON config file. Missing keys take defaults; unknown keys fail."""
    text = Path(path).read_text()
    doc = yaml.safe_load(text) if text.strip() else {}
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return RunConfig.model_validate(doc)
