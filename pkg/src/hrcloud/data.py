"""Scene/label containers, the JSON-lines manifest and raster I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

Split = Literal["train", "test"]


class ManifestError(ValueError):
    def __init__(self, path, lineno, message):
        self.path, self.lineno = path, lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class SceneImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    scene_id: str
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"scene {self.scene_id}: expected (H, W, 3) pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError(f"scene {self.scene_id}: pixel values outside [0, 1]")


@dataclass
class LabelMask:
    labels: np.ndarray  # (H, W) uint8 in {0, 1}
    scene_id: str

    def __post_init__(self):
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError(f"mask {self.scene_id}: values must be 0 or 1")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path | None
    split: Split
    scene_id: str


@dataclass
class DatasetManifest:
    name: str
    entries: List[ManifestEntry] = field(default_factory=list)

    def split(self, which: Split) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == which]

    def __len__(self):
        return len(self.entries)


def load_manifest(path: str | Path, require_masks: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest.

    Each non-blank line is an object with ``image``, ``mask`` and ``split``
    keys (``scene_id`` optional, defaults to the image file stem). Relative
    paths resolve against the manifest's directory. Lines starting with ``#``
    are comments.
    """
    path = Path(path)
    base = path.parent
    manifest = DatasetManifest(name=path.stem)
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(path, lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(path, lineno, "record must be an object")
            unknown = set(rec) - {"image", "mask", "split", "scene_id"}
            if unknown:
                raise ManifestError(path, lineno, f"unknown keys {sorted(unknown)}")
            if "image" not in rec:
                raise ManifestError(path, lineno, "missing 'image'")
            split = rec.get("split", "train")
            if split not in ("train", "test"):
                raise ManifestError(path, lineno, f"split must be 'train' or 'test', got {split!r}")
            image = base / rec["image"]
            mask = base / rec["mask"] if rec.get("mask") else None
            if mask is None and require_masks:
                raise ManifestError(path, lineno, "missing 'mask'")
            for p in (image, mask):
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"{path}:{lineno}: referenced file does not exist: {p}")
            scene_id = str(rec.get("scene_id") or image.stem)
            if scene_id in seen:
                raise ManifestError(path, lineno, f"duplicate scene_id {scene_id!r}")
            seen.add(scene_id)
            manifest.entries.append(ManifestEntry(image, mask, split, scene_id))
    if not manifest.entries:
        log.warning("manifest %s has no entries", path)
    return manifest


def write_manifest(path: str | Path, entries) -> None:
    """Write (image, mask, split) triples as a manifest; paths stored as given."""
    with open(path, "w") as fh:
        for image, mask, split in entries:
            fh.write(json.dumps({"image": str(image), "mask": str(mask), "split": split}) + "\n")


def read_image(path: str | Path, scene_id: str | None = None) -> SceneImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return SceneImage(arr, scene_id or Path(path).stem, str(path))


def read_mask(path: str | Path, scene_id: str | None = None) -> LabelMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return LabelMask((arr >= 0.5).astype(np.uint8), scene_id or Path(path).stem)


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_probability(path: str | Path) -> np.ndarray:
    """8-bit grayscale map -> float64 values in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_probability(path: str | Path, p_cloud: np.ndarray) -> None:
    """Cloud probability map as 8-bit grayscale, value = round(255 * p)."""
    write_image(path, p_cloud)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
