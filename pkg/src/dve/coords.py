"""Normalized coordinate convention shared by every module.

Coordinates live in [-1, 1]^2 with (-1, -1) at the CENTER of the top-left
pixel and (+1, +1) at the center of the bottom-right pixel. Points are
stored (x, y): x runs along columns, y along rows. This is the same
convention torch.nn.functional.grid_sample uses with align_corners=True.

Embedding grids are at half the input resolution. Cell (i, j) of an h x w
embedding grid summarizes the 2x2 input-pixel block starting at (2i, 2j),
so its center sits at input-pixel coordinates (2j + 0.5, 2i + 0.5). All
grid-cell geometry below (loss targets, nearest-neighbour match outputs,
softargmax support) uses these receptive-field centers; the centroid of
the grid is exactly (0, 0).
"""

from __future__ import annotations

import numpy as np


def pixel_to_norm(px: np.ndarray, size: int) -> np.ndarray:
    """Map pixel-center coordinates (0 .. size-1) to [-1, 1]."""
    if size < 2:
        raise ValueError("need at least 2 pixels along an axis")
    return 2.0 * np.asarray(px, dtype=np.float64) / (size - 1) - 1.0


def norm_to_pixel(x: np.ndarray, size: int) -> np.ndarray:
    """Map normalized coordinates back to pixel units (0 .. size-1)."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * (size - 1) / 2.0


def identity_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) float64 grid of normalized (x, y) pixel centers."""
    ys = pixel_to_norm(np.arange(height), height)
    xs = pixel_to_norm(np.arange(width), width)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def coarse_cell_centers_1d(n_cells: int, factor: int) -> np.ndarray:
    """Normalized centers of n_cells cells covering factor * n_cells pixels."""
    full = factor * n_cells
    px = factor * np.arange(n_cells) + (factor - 1) / 2.0
    return pixel_to_norm(px, full)


def cell_center_grid(height: int, width: int, factor: int = 2) -> np.ndarray:
    """(h, w, 2) normalized centers of an embedding grid (default half res)."""
    xs = coarse_cell_centers_1d(width, factor)
    ys = coarse_cell_centers_1d(height, factor)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def norm_to_cell_index(coords: np.ndarray, n_cells: int, factor: int = 2) -> np.ndarray:
    """Continuous cell index of normalized coords on an embedding grid axis."""
    full = factor * n_cells
    px = norm_to_pixel(coords, full)
    return (px - (factor - 1) / 2.0) / factor
