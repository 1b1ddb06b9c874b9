"""Procedural multimodal urban scenes for desk-scale experiments.

Two class pairs are deliberately indistinguishable in the optical planes:

* roofs use the same asphalt material as roads, so buildings and road
  ribbons differ only in height;
* trees and low vegetation share one vegetation material (hence the same
  NDVI) and differ only in height.

Clutter goes the other way: it is flat and shares the NDVI of the paved
surfaces, so only its colour in the optical planes gives it away.
"""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError
from .raster import RasterTile, Role, build_composite, compute_ndvi

CLASS_NAMES = ("impervious", "building", "low_vegetation", "tree", "car", "clutter")
IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)

# (IR, R, G) reflectances in [0, 1]
PAVEMENT = (0.58, 0.52, 0.50)
ASPHALT = (0.32, 0.30, 0.31)
VEGETATION = (0.72, 0.24, 0.36)
# IR/R ratio matches pavement so NDVI cannot separate them
CLUTTER_COLOR = (0.40, 0.37, 0.78)
CAR_COLORS = ((0.92, 0.88, 0.20), (0.90, 0.15, 0.18), (0.95, 0.95, 0.95))

PIXEL_NOISE = 0.035
HEIGHT_NOISE = 0.15


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_layers(seed, size=256):
    """Raw scene layers: labels, material ids, optical, nDSM (m) and DSM (m).

    Material ids: 0 pavement, 1 asphalt, 2 vegetation, 3 clutter, 4+ cars.
    """
    if size % 32 or size < 32:
        raise ArgumentError(f"scene size must be a positive multiple of 32, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    s = size / 256.0

    labels = np.full((size, size), IMPERVIOUS, dtype=np.uint8)
    material = np.zeros((size, size), dtype=np.int8)
    ndsm = np.zeros((size, size))

    # road ribbons: one or two per axis
    for axis in (0, 1):
        for _ in range(rng.integers(1, 3)):
            width = rng.integers(int(8 * s) + 1, int(16 * s) + 2)
            pos = rng.integers(0, size - width)
            coord = yy if axis == 0 else xx
            band = (coord >= pos) & (coord < pos + width)
            material[band] = 1

    # low vegetation patches (ellipses)
    for _ in range(rng.integers(8, 12)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(20 * s, 44 * s, 2)
        m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        labels[m] = LOW_VEG
        material[m] = 2
        ndsm[m] = rng.uniform(0.0, 0.4)

    # trees: crowns mostly inside vegetation patches so context cannot tell them apart
    veg_y, veg_x = np.nonzero(labels == LOW_VEG)
    n_trees = rng.integers(14, 22)
    for t in range(n_trees):
        if len(veg_y) and t < n_trees * 3 // 4:
            j = rng.integers(len(veg_y))
            cy, cx = veg_y[j], veg_x[j]
        else:
            cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(10 * s, 17 * s)
        m = _disc(yy, xx, cy, cx, r)
        height = rng.uniform(6.0, 11.0)
        dome = height * np.sqrt(np.clip(1 - ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r), 0, 1))
        labels[m] = TREE
        material[m] = 2
        ndsm[m] = np.maximum(0.6 * height + 0.4 * dome[m], 2.5)

    # buildings: flat asphalt-coloured roofs
    for _ in range(rng.integers(6, 10)):
        h, w = rng.integers(int(20 * s), int(50 * s) + 1, 2)
        r0, c0 = rng.integers(0, size - h), rng.integers(0, size - w)
        labels[r0 : r0 + h, c0 : c0 + w] = BUILDING
        material[r0 : r0 + h, c0 : c0 + w] = 1
        ndsm[r0 : r0 + h, c0 : c0 + w] = rng.uniform(8.0, 15.0)

    # cars sit on asphalt outside buildings
    road_y, road_x = np.nonzero((material == 1) & (labels == IMPERVIOUS))
    for _ in range(rng.integers(10, 16) if len(road_y) else 0):
        j = rng.integers(len(road_y))
        h, w = (int(5 * s) + 1, int(10 * s) + 1) if rng.random() < 0.5 else (int(10 * s) + 1, int(5 * s) + 1)
        r0 = min(max(road_y[j] - h // 2, 0), size - h)
        c0 = min(max(road_x[j] - w // 2, 0), size - w)
        labels[r0 : r0 + h, c0 : c0 + w] = CAR
        material[r0 : r0 + h, c0 : c0 + w] = 4 + rng.integers(len(CAR_COLORS))
        ndsm[r0 : r0 + h, c0 : c0 + w] = 0.9

    # clutter: flat irregular blobs
    for _ in range(rng.integers(8, 12)):
        cy, cx = rng.uniform(0, size, 2)
        m = np.zeros((size, size), dtype=bool)
        for _ in range(4):
            m |= _disc(yy, xx, cy + rng.normal(0, 5 * s), cx + rng.normal(0, 5 * s), rng.uniform(6 * s, 12 * s))
        labels[m] = CLUTTER
        material[m] = 3
        ndsm[m] = 0.0

    palette = np.array((PAVEMENT, ASPHALT, VEGETATION, CLUTTER_COLOR) + CAR_COLORS)
    optical = palette[material].transpose(2, 0, 1)
    optical = optical + rng.normal(0, PIXEL_NOISE, optical.shape)
    optical = np.clip(optical, 0.01, 1.0).astype(np.float32)

    ndsm = np.maximum(ndsm + rng.normal(0, HEIGHT_NOISE, ndsm.shape), 0)
    ramp_y, ramp_x = rng.uniform(-2, 2, 2)
    terrain = 100 + ramp_y * yy / size + ramp_x * xx / size
    dsm = terrain + ndsm
    return {"labels": labels, "material": material, "optical": optical, "ndsm": ndsm, "dsm": dsm}


def synth_scene(seed, size=256, k=6):
    """Return ``(optical, composite, label)`` tiles for one synthetic scene.

    ``optical`` holds IR, R, G planes in [0, 1]; ``composite`` holds the
    scaled DSM, nDSM and NDVI; ``label`` holds class ids ``0..5``.
    """
    if k != 6:
        raise ArgumentError("the generator produces exactly 6 classes")
    layers = generate_layers(seed, size)
    optical = layers["optical"]
    opt = RasterTile(size, size)
    for role, plane in zip((Role.IR, Role.R, Role.G), optical):
        opt.add(role, plane)
    ndvi = compute_ndvi(optical[0], optical[1])
    composite = build_composite(layers["dsm"], layers["ndsm"], ndvi)
    return opt, composite, RasterTile.from_label(layers["labels"])


def synth_pack(n_tiles, size=256, seed=0):
    """``n_tiles`` scenes with per-tile seeds derived from ``seed``."""
    return [synth_scene(np.random.SeedSequence([seed, i]), size) for i in range(n_tiles)]
