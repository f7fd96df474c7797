"""Command-line entry point: ``hrcloud <command> ...``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 data error (missing files, bad manifests, missing labels).

The run-directory root is taken from ``HRCLOUD_RUNS_ROOT`` (default
``./runs``); everything else comes from the config document.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml
from pydantic import ValidationError

from .config import RunConfig, load_config
from .data import ManifestError, load_manifest, read_image, read_mask, read_probability, write_image, write_mask, write_probability
from .metrics import EvalReport, report_constants, score_map
from .synthetic import write_dataset
from .tiling import TileGrid, crop_array, plan_grid, stitch_tiles
from .trainer import CheckpointError, check_compatible, fit, load_model, predict_scene

log = logging.getLogger("hrcloud")

RUNS_ROOT_ENV = "HRCLOUD_RUNS_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DATA = 0, 1, 2, 3

# overlay colors (RGB)
PALETTE = {
    "tp": (255, 255, 255),  # cloud predicted as cloud: white
    "tn": (0, 0, 0),  # clear predicted as clear: black
    "fp": (255, 0, 0),  # clear predicted as cloud: red
    "fn": (0, 0, 255),  # cloud predicted as clear: blue
}


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 1)."""


class DataError(ValueError):
    """Unusable input data (exit code 3)."""


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ROOT_ENV, "runs"))


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{where}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def resolve_config(path) -> RunConfig:
    """Load a config; a relative ``data.manifest`` resolves against the config's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = load_config(path)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    manifest = cfg.data.manifest
    if manifest and not Path(manifest).is_absolute():
        manifest = str((path.parent / manifest).resolve())
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"manifest": manifest})})
    return cfg


def _require_manifest(cfg: RunConfig, override: Optional[str]):
    manifest = override or cfg.data.manifest
    if not manifest:
        raise ConfigError("data.manifest: a training manifest is required")
    manifest = str(Path(manifest).resolve())
    cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"manifest": manifest})})
    m = load_manifest(manifest)
    if not m.split("train"):
        raise DataError(f"manifest {manifest}: empty train split")
    return cfg, m


def fresh_run_dir(name: str) -> Path:
    root = runs_root()
    candidate = root / name
    n = 1
    while candidate.exists():
        candidate = root / f"{name}-{n}"
        n += 1
    return candidate


def _write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "report.txt").write_text(report.table() + "\n")


# commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    cfg, manifest = _require_manifest(cfg, args.manifest)
    run_dir = Path(args.run_dir) if args.run_dir else fresh_run_dir(cfg.name)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    result = fit(manifest, cfg, run_dir)
    if result.final_report is not None:
        _write_report(result.final_report, run_dir)
        print(result.final_report.table())
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Train and evaluate one run per (lambda1, lambda2) grid point."""
    base = resolve_config(args.config)
    base, manifest = _require_manifest(base, args.manifest)
    if not manifest.split("test"):
        raise DataError(f"manifest {base.data.manifest}: a sweep needs a test split to score")
    run_dir = Path(args.run_dir) if args.run_dir else fresh_run_dir(f"{base.name}-sweep")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(base.to_yaml())
    points = [(a, b) for a in base.sweep.lambda1 for b in base.sweep.lambda2]
    with open(run_dir / "sweep.jsonl", "w") as fh:
        for i, (l1, l2) in enumerate(points):
            cfg = base.model_copy(update={"loss": base.loss.model_copy(update={"lambda1": l1, "lambda2": l2})})
            point_dir = run_dir / f"l1_{l1:g}_l2_{l2:g}"
            point_dir.mkdir()
            (point_dir / "config.yaml").write_text(cfg.to_yaml())
            result = fit(manifest, cfg, point_dir)
            means = result.final_report.means()
            rec = {"lambda1": l1, "lambda2": l2, "steps": result.trainer.global_step, **means}
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            print(f"[{i + 1}/{len(points)}] lambda1={l1:g} lambda2={l2:g} "
                  f"e_ma={means['e_ma']:.4f} F_beta^w={means['f_beta_w']:.4f} m_s={means['m_s']:.4f}")
    print(f"sweep results: {run_dir / 'sweep.jsonl'}")
    return EXIT_OK


def _load_checkpoint(path, config_path=None):
    try:
        model, cfg = load_model(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if config_path:
        other = resolve_config(config_path)
        try:
            check_compatible(cfg, other)
        except CheckpointError as e:
            raise ConfigError(str(e)) from None
    return model, cfg


def cmd_predict(args) -> int:
    inputs = [Path(p) for p in args.input]
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"input images not found: {', '.join(missing)}")
    model, cfg = _load_checkpoint(args.checkpoint, args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        scene = read_image(path)
        p = predict_scene(model, scene.pixels, cfg.data.tile_size, cfg.optimizer.batch_size)
        write_probability(out / f"{path.stem}_prob.png", p)
        write_mask(out / f"{path.stem}_mask.png", p >= 0.5)
        if args.raw:
            np.save(out / f"{path.stem}_prob.npy", p)
        print(f"{path.name}: {p.shape[0]}x{p.shape[1]} -> {out / (path.stem + '_prob.png')}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest, require_masks=False)
    unlabeled = [e.scene_id for e in manifest.entries if e.mask_path is None]
    if unlabeled:
        raise DataError(f"scenes without labels: {', '.join(unlabeled)}")
    if not manifest.entries:
        raise DataError(f"manifest {args.manifest} has no scenes")
    if args.checkpoint:
        model, cfg = _load_checkpoint(args.checkpoint)
    else:
        pred_dir = Path(args.predictions)
        missing = [e.scene_id for e in manifest.entries if not (pred_dir / f"{e.scene_id}_prob.png").exists()]
        if missing:
            raise DataError(f"no prediction in {pred_dir} for scenes: {', '.join(missing)}")
        cfg = resolve_config(args.config) if args.config else RunConfig()
    report = EvalReport(constants=report_constants(cfg.metrics))
    for e in manifest.entries:
        label = read_mask(e.mask_path, e.scene_id).labels
        if args.checkpoint:
            y = predict_scene(model, read_image(e.image_path).pixels, cfg.data.tile_size, cfg.optimizer.batch_size)
        else:
            y = read_probability(Path(args.predictions) / f"{e.scene_id}_prob.png")
        if y.shape != label.shape:
            raise DataError(f"scene {e.scene_id}: prediction {y.shape} vs label {label.shape}")
        report.scenes.append(score_map(y, label, e.scene_id, cfg.metrics))
    _write_report(report, Path(args.out))
    print(report.table())
    return EXIT_OK


def cmd_tile(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise DataError(f"input not found: {src}")
    pixels = np.load(src) if src.suffix == ".npy" else read_image(src).pixels
    grid = plan_grid(pixels.shape[0], pixels.shape[1], args.tile_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (r, c), tile in zip(grid.indices(), crop_array(pixels, grid)):
        np.save(out / f"tile_r{r:04d}_c{c:04d}.npy", tile)
    (out / "grid.json").write_text(json.dumps(vars(grid), indent=2))
    print(f"{grid.count} tiles ({grid.rows}x{grid.cols}, pad bottom {grid.pad_bottom}, right {grid.pad_right}) -> {out}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    src = Path(args.tiles)
    meta = src / "grid.json"
    if not meta.exists():
        raise DataError(f"{src}: no grid.json (not a tile directory)")
    grid = TileGrid(**json.loads(meta.read_text()))
    paths = [src / f"tile_r{r:04d}_c{c:04d}.npy" for r, c in grid.indices()]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise DataError(f"{src}: missing tiles {', '.join(missing[:5])}")
    scene = stitch_tiles([np.load(p) for p in paths], grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".npy":
        np.save(out, scene)
    else:
        write_image(out, scene)
    print(f"{scene.shape[0]}x{scene.shape[1]} scene -> {out}")
    return EXIT_OK


def confusion_overlay(pred: np.ndarray, label: np.ndarray):
    """RGB overlay of a binary prediction against a binary label, plus pixel counts."""
    if pred.shape != label.shape:
        raise DataError(f"shape mismatch: prediction {pred.shape} vs label {label.shape}")
    pred, label = pred.astype(bool), label.astype(bool)
    classes = {
        "tp": pred & label,
        "tn": ~pred & ~label,
        "fp": pred & ~label,
        "fn": ~pred & label,
    }
    image = np.zeros(pred.shape + (3,), np.uint8)
    for name, where in classes.items():
        image[where] = PALETTE[name]
    return image, {name: int(where.sum()) for name, where in classes.items()}


def cmd_visualize(args) -> int:
    for p in (args.pred, args.label):
        if not Path(p).exists():
            raise DataError(f"not found: {p}")
    pred = read_mask(args.pred).labels
    label = read_mask(args.label).labels
    image, counts = confusion_overlay(pred, label)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(image).save(out)
    print(json.dumps(counts))
    return EXIT_OK


def cmd_synth(args) -> int:
    path = write_dataset(args.out, args.train, args.test, (args.size, args.size), args.seed)
    print(f"synthetic manifest: {path}")
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrcloud",
        description="Cloud detection with a high-resolution segmentation network.",
        epilog=f"Run directories are created under ${RUNS_ROOT_ENV} (default ./runs). "
        "Exit codes: 0 ok, 1 config/argument error, 2 runtime error, 3 data error.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config document")
    p.add_argument("--config", required=True, help="YAML/JSON run config")
    p.add_argument("--manifest", help="override data.manifest")
    p.add_argument("--run-dir", help="explicit run directory (default: $%s/<name>)" % RUNS_ROOT_ENV)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train/evaluate every (lambda1, lambda2) point of the config's sweep grid")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="override data.manifest")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="write cloud-probability and 0/255 mask images for scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, nargs="+", help="scene image(s)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="check the checkpoint against this config before predicting")
    p.add_argument("--raw", action="store_true", help="also save the float map as .npy")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a labeled manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="predict every scene with this checkpoint")
    src.add_argument("--predictions", help="directory of <scene_id>_prob.png maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for report.json / report.txt")
    p.add_argument("--config", help="metric constants when scoring --predictions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tile", help="crop a scene into reflection-padded tiles (.npy) plus grid.json")
    p.add_argument("--input", required=True, help="scene image or .npy array")
    p.add_argument("--tile-size", type=int, default=352)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("stitch", help="reassemble a tile directory into a scene (.npy or image)")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser(
        "visualize",
        help="confusion overlay of a predicted mask against a label",
        description="Palette: TP white, TN black, FP red, FN blue. Prints the per-class pixel counts.",
    )
    p.add_argument("--pred", required=True, help="predicted mask image (>= 128 is cloud)")
    p.add_argument("--label", required=True, help="label mask image (>= 128 is cloud)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("synth", help="write a seeded synthetic cloud dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=4)
    p.add_argument("--test", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
