"""Two-view training loop, checkpoints and scene-level prediction."""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import augment
from .config import AblationFlags, LossConfig, RunConfig
from .data import DatasetManifest, ManifestEntry, read_image, read_mask
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, report_constants, score_map
from .model import HRCloudNet, build_model
from .tiling import crop_array, encode_label, plan_grid, stitch_tiles

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hrcloud-checkpoint/1"


class CheckpointError(ValueError):
    pass


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) array -> (N, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).to(dtype)


def targets(labels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W) binary labels -> (N, 2, H, W) one-hot tensor."""
    return torch.from_numpy(np.stack([encode_label(m) for m in labels])).to(dtype)


def make_optimizer(model: torch.nn.Module, cfg) -> torch.optim.Optimizer:
    kwargs = dict(lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)
    if cfg.decoupled_weight_decay:
        return torch.optim.AdamW(model.parameters(), **kwargs)
    return torch.optim.Adam(model.parameters(), **kwargs)


@contextmanager
def frozen_running_stats(model: torch.nn.Module):
    """Batch norm still normalizes with batch statistics but leaves its running state alone."""
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, (momentum, tracked) in zip(norms, saved):
            m.momentum = momentum
            m.num_batches_tracked.copy_(tracked)


def train_step(
    model: HRCloudNet,
    optimizer: torch.optim.Optimizer,
    batch: Tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    loss_cfg: LossConfig = LossConfig(),
    flags: AblationFlags = AblationFlags(),
) -> LossBreakdown:
    """One forward per view, backward through the weighted loss, one update.

    The two views go through separate forward passes so batch-norm statistics
    are computed per view. Only the teacher pass updates the running
    estimates used at evaluation time, so they describe un-augmented input.
    """
    x, x_aug, t = batch
    if not (x.shape == x_aug.shape and x.shape[0] == t.shape[0] and x.shape[-2:] == t.shape[-2:]):
        raise ValueError(f"inconsistent batch shapes {tuple(x.shape)}, {tuple(x_aug.shape)}, {tuple(t.shape)}")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    y = model(x)
    y_aug = None
    if flags.use_aug_view_loss:
        with frozen_running_stats(model):
            y_aug = model(x_aug)
    parts = total_loss(y, y_aug, t, loss_cfg.tau, loss_cfg.lambda1, loss_cfg.lambda2, loss_cfg.reduction)
    for name in ("l_ce", "l_ce_aug", "total"):
        value = getattr(parts, name)
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name} = {float(value.detach())}")
    parts.total.backward()
    optimizer.step()
    return replace(parts, l_ce=parts.l_ce.detach(), l_ce_aug=parts.l_ce_aug.detach(), total=parts.total.detach())


@torch.no_grad()
def predict_tiles(model: HRCloudNet, tiles: Sequence[np.ndarray], batch_size: int = 8) -> List[np.ndarray]:
    """Cloud-probability map for each (T, T, 3) tile, in evaluation mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(tiles), batch_size):
        chunk = to_tensor(np.stack(tiles[i:i + batch_size]), dtype)
        out.extend(model(chunk)[:, 1].float().numpy())
    return out


def predict_scene(model: HRCloudNet, pixels: np.ndarray, tile_size: int, batch_size: int = 8) -> np.ndarray:
    """Crop, predict and re-stitch a full (H, W, 3) scene into an (H, W) map."""
    grid = plan_grid(pixels.shape[0], pixels.shape[1], tile_size)
    maps = predict_tiles(model, crop_array(pixels, grid), batch_size)
    return stitch_tiles(maps, grid)


@dataclass
class TileSet:
    images: np.ndarray  # (N, T, T, 3) float32
    labels: np.ndarray  # (N, T, T) uint8

    def __len__(self):
        return len(self.images)


def load_tiles(entries: Sequence[ManifestEntry], tile_size: int) -> TileSet:
    images, labels = [], []
    for e in entries:
        scene = read_image(e.image_path, e.scene_id)
        mask = read_mask(e.mask_path, e.scene_id)
        if mask.labels.shape != scene.pixels.shape[:2]:
            raise ValueError(f"scene {e.scene_id}: mask shape {mask.labels.shape} != image {scene.pixels.shape[:2]}")
        grid = plan_grid(*mask.labels.shape, tile_size)
        images += crop_array(scene.pixels, grid)
        labels += crop_array(mask.labels, grid)
    if not images:
        return TileSet(np.zeros((0, tile_size, tile_size, 3), np.float32), np.zeros((0, tile_size, tile_size), np.uint8))
    return TileSet(np.stack(images).astype(np.float32), np.stack(labels).astype(np.uint8))


def evaluate_entries(model, entries, tile_size, cfg: RunConfig) -> EvalReport:
    report = EvalReport(constants=report_constants(cfg.metrics))
    for e in entries:
        scene = read_image(e.image_path, e.scene_id)
        mask = read_mask(e.mask_path, e.scene_id)
        y = predict_scene(model, scene.pixels, tile_size, cfg.optimizer.batch_size)
        report.scenes.append(score_map(y, mask.labels, e.scene_id, cfg.metrics))
    return report


def evaluate_tiles(model, tiles: TileSet, cfg: RunConfig) -> EvalReport:
    """Score each tile as its own scene."""
    report = EvalReport(constants=report_constants(cfg.metrics))
    preds = predict_tiles(model, list(tiles.images), cfg.optimizer.batch_size)
    for i, (y, t) in enumerate(zip(preds, tiles.labels)):
        report.scenes.append(score_map(y, t, f"tile{i}", cfg.metrics))
    return report


class Trainer:
    """Owns the model, optimizer and the position in the data stream.

    All data randomness (epoch shuffles, augmentation draws) derives from
    ``(seed, epoch, step)``, so resuming from a checkpoint replays the exact
    same batches.
    """

    def __init__(self, config: RunConfig, model: Optional[HRCloudNet] = None, dtype=torch.float32):
        self.config = config
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
        self.model = model or build_model(
            config.flags, config.backbone, config.decoder, config.data.tile_size, seed=config.seed
        )
        self.model.to(dtype)
        self.dtype = dtype
        self.optimizer = make_optimizer(self.model, config.optimizer)
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0

    # data stream -----------------------------------------------------------

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 0, epoch]).permutation(n)

    def batches(self, tiles: TileSet, epoch: int, start: int = 0) -> Iterator[Tuple[int, np.ndarray]]:
        order = self.epoch_order(len(tiles), epoch)
        bs = self.config.optimizer.batch_size
        n_steps = math.ceil(len(tiles) / bs)
        for step in range(start, n_steps):
            yield step, order[step * bs:(step + 1) * bs]

    def make_batch(self, tiles: TileSet, idx: np.ndarray, epoch: int, step: int):
        rng = np.random.default_rng([self.config.seed, 1, epoch, step])
        x = tiles.images[idx]
        x_aug = np.stack([augment(img, self.config.augmentation, rng)[0] for img in x])
        return to_tensor(x, self.dtype), to_tensor(x_aug, self.dtype), targets(tiles.labels[idx], self.dtype)

    # training --------------------------------------------------------------

    def step(self, batch) -> LossBreakdown:
        return train_step(self.model, self.optimizer, batch, self.config.loss, self.config.flags)

    def _steps_left(self) -> bool:
        cap = self.config.optimizer.max_steps
        return cap is None or self.global_step < cap

    def run_epoch(self, tiles: TileSet, on_step=None) -> List[dict]:
        records = []
        for step, idx in self.batches(tiles, self.epoch, self.step_in_epoch):
            if not self._steps_left():
                return records
            parts = self.step(self.make_batch(tiles, idx, self.epoch, step))
            rec = {"kind": "step", "epoch": self.epoch, "step": self.global_step, **parts.as_record()}
            records.append(rec)
            self.global_step += 1
            self.step_in_epoch = step + 1
            if on_step:
                on_step(rec)
        self.epoch += 1
        self.step_in_epoch = 0
        return records

    # checkpoints -----------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.model_dump(mode="json"),
            "fingerprint": self.config.fingerprint(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path

    @classmethod
    def load(cls, path, config: Optional[RunConfig] = None) -> "Trainer":
        ckpt = read_checkpoint(path)
        stored = RunConfig.model_validate(ckpt["config"])
        config = config or stored
        check_compatible(stored, config)
        dtype = next(iter(v for v in ckpt["model"].values() if v.is_floating_point())).dtype
        trainer = cls(config, model=_model_from(ckpt, config), dtype=dtype)
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.epoch = ckpt["epoch"]
        trainer.step_in_epoch = ckpt["step_in_epoch"]
        trainer.global_step = ckpt["global_step"]
        torch.set_rng_state(ckpt["torch_rng"])
        return trainer


def read_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    return ckpt


def check_compatible(stored: RunConfig, config: RunConfig) -> None:
    for section in ("backbone", "decoder", "flags"):
        a = getattr(stored, section).model_dump()
        b = getattr(config, section).model_dump()
        for key in a:
            if a[key] != b[key]:
                raise CheckpointError(
                    f"checkpoint/config mismatch at {section}.{key}: checkpoint has {a[key]!r}, config has {b[key]!r}"
                )


def _model_from(ckpt: dict, config: RunConfig) -> HRCloudNet:
    model = build_model(config.flags, config.backbone, config.decoder, seed=None)
    state = ckpt["model"]
    own = model.state_dict()
    for key in own:
        if key not in state:
            raise CheckpointError(f"checkpoint lacks parameter {key}")
        if own[key].shape != state[key].shape:
            raise CheckpointError(f"parameter {key}: checkpoint shape {tuple(state[key].shape)} != model {tuple(own[key].shape)}")
    extra = set(state) - set(own)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)[:5]}")
    dtype = next(iter(v for v in state.values() if v.is_floating_point())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model


def load_model(path) -> Tuple[HRCloudNet, RunConfig]:
    """Model in evaluation mode plus the config it was trained with."""
    ckpt = read_checkpoint(path)
    config = RunConfig.model_validate(ckpt["config"])
    if ckpt.get("fingerprint") != config.fingerprint():
        raise CheckpointError(f"{path}: stored fingerprint does not match the embedded config")
    model = _model_from(ckpt, config)
    model.eval()
    return model, config


@dataclass
class FitResult:
    trainer: Trainer
    log: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    final_report: Optional[EvalReport] = None


def fit(manifest: DatasetManifest, config: RunConfig, run_dir=None, trainer: Optional[Trainer] = None) -> FitResult:
    """Train for ``config.optimizer.epochs`` epochs over the manifest's train tiles.

    With a ``run_dir``: the per-step/per-epoch log goes to ``metrics.jsonl``
    and the latest checkpoint to ``checkpoint.pt``.
    """
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError(f"manifest {manifest.name!r} has an empty train split")
    test_entries = manifest.split("test")
    tile = config.data.tile_size
    tiles = load_tiles(train_entries, tile)
    trainer = trainer or Trainer(config)
    result = FitResult(trainer)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "metrics.jsonl", "a")

    def emit(rec):
        result.log.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    scored_at = None
    try:
        while trainer.epoch < config.optimizer.epochs and trainer._steps_left():
            trainer.run_epoch(tiles, on_step=emit)
            epoch_done = trainer.step_in_epoch == 0
            if test_entries and epoch_done:
                report = evaluate_entries(trainer.model, test_entries, tile, config)
                result.final_report = report
                scored_at = trainer.global_step
                emit({"kind": "epoch", "epoch": trainer.epoch - 1, "step": trainer.global_step, **report.means()})
            if run_dir is not None and (trainer.epoch % config.checkpoint_every == 0 or not trainer._steps_left()):
                result.checkpoint = trainer.save(run_dir / "checkpoint.pt")
            log.info("epoch %d done (step %d)", trainer.epoch, trainer.global_step)
        if test_entries and trainer.global_step > 0 and scored_at != trainer.global_step:
            # stopped mid-epoch by max_steps: score the final weights too
            report = evaluate_entries(trainer.model, test_entries, tile, config)
            result.final_report = report
            emit({"kind": "final", "epoch": trainer.epoch, "step": trainer.global_step, **report.means()})
    finally:
        if log_fh:
            log_fh.close()
    if run_dir is not None and result.checkpoint is None:
        result.checkpoint = trainer.save(run_dir / "checkpoint.pt")
    return result
