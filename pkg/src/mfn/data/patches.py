"""Sliding-window grids, patch extraction and overlap-averaged stitching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ArgumentError, DataError
from ..tensor import softmax_channels


def axis_origins(size, patch_size, stride):
    """Window starts along one axis; a final window is clamped to the edge."""
    if patch_size > size:
        raise ArgumentError(f"patch {patch_size} larger than tile dimension {size}")
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    if stride > patch_size and size > patch_size:
        raise ArgumentError(f"stride {stride} > patch {patch_size} would leave uncovered pixels")
    origins = list(range(0, size - patch_size + 1, stride))
    if origins[-1] + patch_size < size:
        origins.append(size - patch_size)
    return origins


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_size: int
    stride: int
    origins: tuple

    def __len__(self):
        return len(self.origins)


def patch_grid(height, width, patch_size=128, stride=64):
    rows = axis_origins(height, patch_size, stride)
    cols = axis_origins(width, patch_size, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(height, width, patch_size, stride, origins)


def coverage_counts(grid):
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    p = grid.patch_size
    for r, c in grid.origins:
        counts[r : r + p, c : c + p] += 1
    return counts


def stitch_predictions(windows, grid):
    """Per-pixel mean of the window maps ``(n_windows, k, p, p)`` covering it.

    Accumulation runs in float64 in grid order, so the result does not
    depend on how the windows were produced.
    """
    if len(windows) != len(grid.origins):
        raise ArgumentError(f"{len(windows)} window maps for {len(grid.origins)} grid windows")
    p = grid.patch_size
    k = windows[0].shape[0]
    acc = np.zeros((k, grid.height, grid.width), dtype=np.float64)
    for (r, c), win in zip(grid.origins, windows):
        if win.shape != (k, p, p):
            raise ArgumentError(f"window map shape {win.shape} != {(k, p, p)}")
        acc[:, r : r + p, c : c + p] += win
    return (acc / coverage_counts(grid)).astype(np.float32)


def predict_tile(model, inputs, patch_size=128, stride=64, batch_size=8):
    """Sliding-window inference over one tile.

    ``inputs`` is a tuple of ``(c, h, w)`` arrays, one per model input. Each
    window's scores go through a softmax before the overlap averaging.
    Returns the stitched ``(k, h, w)`` probability map.
    """
    h, w = inputs[0].shape[1:]
    grid = patch_grid(h, w, patch_size, stride)
    model.eval()
    maps = []
    for start in range(0, len(grid.origins), batch_size):
        chunk = grid.origins[start : start + batch_size]
        batch = tuple(
            np.stack([x[:, r : r + patch_size, c : c + patch_size] for r, c in chunk])
            for x in inputs
        )
        probs = softmax_channels(model.forward(*batch))
        maps.extend(probs)
    return stitch_predictions(maps, grid)


class Patch(NamedTuple):
    inputs: tuple
    target: np.ndarray
    tile: int
    row: int
    col: int


def extract_patches(tiles, patch_size=128, stride=64, seed=0):
    """Co-located training patches from ``(inputs, labels)`` tile pairs.

    ``inputs`` is a tuple of ``(c, h, w)`` arrays and ``labels`` an
    ``(h, w)`` array. The patch order is shuffled with ``seed``.
    """
    patches = []
    for t, (inputs, labels) in enumerate(tiles):
        h, w = labels.shape
        for x in inputs:
            if x.shape[1:] != (h, w):
                raise DataError(f"tile {t}: input {x.shape[1:]} does not match labels {(h, w)}")
        grid = patch_grid(h, w, patch_size, stride)
        for r, c in grid.origins:
            ins = tuple(x[:, r : r + patch_size, c : c + patch_size].copy() for x in inputs)
            lab = labels[None, r : r + patch_size, c : c + patch_size].astype(np.int64)
            patches.append(Patch(ins, lab, t, r, c))
    order = np.random.default_rng(seed).permutation(len(patches))
    return [patches[i] for i in order]
