import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from core.filterbank import FilterBank
from core.network import UnrolledNetwork
from errors import DimensionError

logger = logging.getLogger(__name__)

MID_GRAY = 128


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    """Min-max scale one filter to [0, 255]; a constant filter becomes mid-gray"""
    low, high = float(tile.min()), float(tile.max())
    if high == low:
        return np.full(tile.shape, MID_GRAY, dtype=np.uint8)
    return np.round((tile - low) * (255.0 / (high - low))).astype(np.uint8)


class FilterExportService:
    """
    Renders an expanded filter bank as one image: row i holds the k rotated
    copies of basis filter i, so each orbit reads left to right. Tiles are
    separated by ``gap`` black pixels.
    """

    def __init__(self, gap: int = 1):
        self.gap = gap

    def filter_grid(self, bank: FilterBank) -> np.ndarray:
        """uint8 [H, W] for single-channel banks, [H, W, 3] for RGB banks"""
        channels = bank.in_channels
        if channels not in (1, 3):
            raise DimensionError(f"can only render 1- or 3-channel filters, bank has {channels}")
        atoms = bank.expand().data
        m, k = bank.num_basis, bank.order
        h, w = bank.kernel_hw
        step_h, step_w = h + self.gap, w + self.gap
        grid = np.zeros((m * step_h - self.gap, k * step_w - self.gap, channels), dtype=np.uint8)
        for i in range(m):
            for j in range(k):
                tile = normalize_tile(atoms[i * k + j])  # [C, h, w]
                grid[i * step_h:i * step_h + h, j * step_w:j * step_w + w] = tile.transpose(1, 2, 0)
        return grid[..., 0] if channels == 1 else grid

    def export(self, net: UnrolledNetwork, layer: int, path: Union[str, Path]) -> Path:
        """Экспорт фильтров слоя в PGM/PPM"""
        if not 0 <= layer < len(net.layers):
            raise DimensionError(f"layer {layer} out of range for a {len(net.layers)}-layer network")
        grid = self.filter_grid(net.layers[layer].bank)
        path = Path(path)
        if path.suffix.lower() not in (".pgm", ".ppm", ".pnm"):
            path = path.with_suffix(".pgm" if grid.ndim == 2 else ".ppm")
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(grid).save(path, format="PPM")
        logger.info("wrote %dx%d filter grid of layer %d to %s", grid.shape[1], grid.shape[0], layer, path)
        return path
