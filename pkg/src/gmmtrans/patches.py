"""Random patch sampling for training and overlapping tiling/stitching for inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractViolation

WINDOW_LIFT = 1e-3


def blend_window(patch_size: int) -> np.ndarray:
    """Separable Hann window lifted by WINDOW_LIFT so its border stays positive."""
    i = np.arange(patch_size, dtype=np.float64)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / patch_size) + WINDOW_LIFT
    return np.outer(w, w)


@dataclass
class PatchGrid:
    image_height: int
    image_width: int
    patch_size: int
    stride: int
    coords: List[Tuple[int, int]]
    blend_window: np.ndarray

    def __len__(self):
        return len(self.coords)


def _check_fits(height, width, patch_size):
    if patch_size < 1:
        raise ConfigError(f"patch_size must be >= 1, got {patch_size}", ["patch_size"])
    if height < patch_size or width < patch_size:
        raise ContractViolation(f"image {height}x{width} is smaller than patch size {patch_size}")


def _anchors_1d(length: int, patch_size: int, stride: int) -> List[int]:
    pos = list(range(0, length - patch_size + 1, stride))
    if pos[-1] + patch_size < length:
        pos.append(length - patch_size)  # clamp the last patch to the border
    return pos


def make_grid(image_height: int, image_width: int, patch_size: int, stride: int) -> PatchGrid:
    if not 1 <= stride <= patch_size:
        raise ConfigError(f"stride must be in [1, {patch_size}], got {stride}", ["stride"])
    _check_fits(image_height, image_width, patch_size)
    rows = _anchors_1d(image_height, patch_size, stride)
    cols = _anchors_1d(image_width, patch_size, stride)
    coords = [(r, c) for r in rows for c in cols]
    return PatchGrid(image_height, image_width, patch_size, stride, coords, blend_window(patch_size))


def extract_patches(image: np.ndarray, anchors: Sequence[Tuple[int, int]], patch_size: int) -> np.ndarray:
    """Patches at the given top-left anchors, shape (N, P, P)."""
    image = np.asarray(image)
    _check_fits(image.shape[0], image.shape[1], patch_size)
    windows = sliding_window_view(image, (patch_size, patch_size))
    if len(anchors) == 0:
        return np.empty((0, patch_size, patch_size), dtype=image.dtype)
    a = np.asarray(anchors, dtype=np.int64)
    return windows[a[:, 0], a[:, 1]].copy()


def extract(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != (grid.image_height, grid.image_width):
        raise ContractViolation(
            f"image {image.shape} does not match grid {grid.image_height}x{grid.image_width}"
        )
    return extract_patches(image, grid.coords, grid.patch_size)


def sample_random_patches(
    image: np.ndarray, n: int, patch_size: int, rng: np.random.Generator
) -> List[Tuple[np.ndarray, Tuple[int, int]]]:
    """``n`` patches with anchors drawn uniformly over all valid positions."""
    image = np.asarray(image)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}", ["n"])
    _check_fits(image.shape[0], image.shape[1], patch_size)
    rows = rng.integers(0, image.shape[0] - patch_size + 1, size=n)
    cols = rng.integers(0, image.shape[1] - patch_size + 1, size=n)
    anchors = [(int(r), int(c)) for r, c in zip(rows, cols)]
    patches = extract_patches(image, anchors, patch_size)
    return list(zip(patches, anchors))


def stitch(patches, grid: PatchGrid) -> np.ndarray:
    """Window-weighted average of overlapping patches; accumulation runs in anchor order."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] != len(grid.coords):
        raise ContractViolation(f"got {patches.shape[0]} patches for a grid of {len(grid.coords)}")
    if patches.shape[1:] != (grid.patch_size, grid.patch_size):
        raise ContractViolation(f"patch shape {patches.shape[1:]} does not match grid")
    P, w = grid.patch_size, grid.blend_window
    num = np.zeros((grid.image_height, grid.image_width))
    den = np.zeros_like(num)
    for (r, c), patch in zip(grid.coords, patches):
        num[r:r + P, c:c + P] += w * patch
        den[r:r + P, c:c + P] += w
    return num / den


def coverage(grid: PatchGrid) -> np.ndarray:
    """Per-pixel sum of blend weights."""
    P = grid.patch_size
    den = np.zeros((grid.image_height, grid.image_width))
    for r, c in grid.coords:
        den[r:r + P, c:c + P] += grid.blend_window
    return den
