"""Scene tiling: crop scenes into fixed-size tiles and stitch tile maps back.

Boundary tiles are reflection-padded up to the next multiple of the tile
size; stitching drops the padding, so ``stitch_tiles(crop_scene(x))`` returns
``x`` exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class TileGrid:
    scene_height: int
    scene_width: int
    tile_size: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def origin(self, row: int, col: int) -> Tuple[int, int]:
        """Top-left pixel of tile (row, col) in padded-scene coordinates."""
        return row * self.tile_size, col * self.tile_size

    def indices(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def locate(self, y: int, x: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        """Map a scene pixel to ((row, col), (dy, dx))."""
        if not (0 <= y < self.scene_height and 0 <= x < self.scene_width):
            raise IndexError(f"pixel ({y}, {x}) outside {self.scene_height}x{self.scene_width} scene")
        t = self.tile_size
        return (y // t, x // t), (y % t, x % t)


@dataclass(frozen=True)
class Tile:
    pixels: np.ndarray
    grid_index: Tuple[int, int]
    scene_id: str = ""


def plan_grid(scene_height: int, scene_width: int, tile_size: int = 352) -> TileGrid:
    if scene_height < 1 or scene_width < 1 or tile_size < 1:
        raise ValueError(
            f"grid dimensions must be positive, got {scene_height}x{scene_width} tile {tile_size}"
        )
    rows = math.ceil(scene_height / tile_size)
    cols = math.ceil(scene_width / tile_size)
    return TileGrid(
        scene_height=scene_height,
        scene_width=scene_width,
        tile_size=tile_size,
        rows=rows,
        cols=cols,
        pad_bottom=rows * tile_size - scene_height,
        pad_right=cols * tile_size - scene_width,
    )


def _pad(array: np.ndarray, grid: TileGrid) -> np.ndarray:
    if grid.pad_bottom == 0 and grid.pad_right == 0:
        return array
    widths = [(0, grid.pad_bottom), (0, grid.pad_right)] + [(0, 0)] * (array.ndim - 2)
    # a 1-pixel axis cannot be reflected
    mode = "reflect" if min(array.shape[:2]) > 1 else "edge"
    return np.pad(array, widths, mode=mode)


def crop_array(array: np.ndarray, grid: TileGrid) -> List[np.ndarray]:
    """Row-major list of tile_size x tile_size crops of a (H, W, ...) array."""
    if array.shape[:2] != (grid.scene_height, grid.scene_width):
        raise ValueError(
            f"array of shape {array.shape[:2]} does not match grid planned for "
            f"{grid.scene_height}x{grid.scene_width}"
        )
    padded = _pad(array, grid)
    t = grid.tile_size
    return [padded[r * t:(r + 1) * t, c * t:(c + 1) * t] for r, c in grid.indices()]


def crop_scene(scene, grid: TileGrid) -> List[Tile]:
    """Crop a :class:`~hrcloud.data.SceneImage` (or bare array) into tiles."""
    pixels = getattr(scene, "pixels", scene)
    scene_id = getattr(scene, "scene_id", "")
    crops = crop_array(np.asarray(pixels), grid)
    return [Tile(p, idx, scene_id) for p, idx in zip(crops, grid.indices())]


def stitch_tiles(tiles: Sequence, grid: TileGrid) -> np.ndarray:
    """Inverse of :func:`crop_array`; accepts arrays or :class:`Tile` objects."""
    if len(tiles) != grid.count:
        raise ValueError(f"expected {grid.count} tiles for a {grid.rows}x{grid.cols} grid, got {len(tiles)}")
    arrays = [np.asarray(getattr(t, "pixels", t)) for t in tiles]
    first = arrays[0].shape
    t = grid.tile_size
    if first[:2] != (t, t):
        raise ValueError(f"tiles must be {t}x{t}, got {first[:2]}")
    for i, a in enumerate(arrays):
        if a.shape != first:
            raise ValueError(f"tile {i} has shape {a.shape}, expected {first}")
    out = np.empty((grid.rows * t, grid.cols * t) + first[2:], dtype=arrays[0].dtype)
    for (r, c), a in zip(grid.indices(), arrays):
        out[r * t:(r + 1) * t, c * t:(c + 1) * t] = a
    return out[:grid.scene_height, :grid.scene_width]


def encode_label(mask: np.ndarray) -> np.ndarray:
    """Binary (H, W) mask -> (2, H, W) one-hot target, channel 1 = cloud."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("label mask must contain only 0 and 1")
    cloud = mask.astype(np.float32)
    return np.stack([1.0 - cloud, cloud])
