"""Multi-channel raster tiles and the MRT binary format.

Layout (little-endian)::

    "MRT1" | u8 version=1 | u8 channel_count | u16 reserved=0
    | u32 height | u32 width
    | per channel: u8 role | u8 dtype (0=f32, 1=u8) | plane, row-major

Label planes are stored as u8 with 255 meaning "ignore".
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import DataError, FormatError, ShapeError

MAGIC = b"MRT1"
VERSION = 1
IGNORE = 255
_HEADER = struct.Struct("<4sBBHII")


class Role(IntEnum):
    IR = 0
    R = 1
    G = 2
    B = 3
    DSM = 4
    NDSM = 5
    NDVI = 6
    LABEL = 7
    # class-probability planes written by prediction; not part of the input roles
    SCORE = 8


@dataclass
class RasterTile:
    """A stack of equally sized planes, each tagged with its role."""

    height: int
    width: int
    channels: list = field(default_factory=list)

    def __post_init__(self):
        for role, plane in self.channels:
            self._check_plane(role, plane)

    def _check_plane(self, role, plane):
        if plane.shape != (self.height, self.width):
            raise ShapeError(f"{Role(role).name} plane {plane.shape} != tile {(self.height, self.width)}")
        if role == Role.LABEL and plane.dtype != np.uint8:
            raise DataError("label planes must be uint8")

    def add(self, role, plane):
        plane = np.asarray(plane)
        if role != Role.LABEL:
            plane = plane.astype(np.float32, copy=False)
        self._check_plane(role, plane)
        self.channels.append((Role(role), plane))
        return self

    @property
    def roles(self):
        return [Role(r) for r, _ in self.channels]

    def plane(self, role):
        for r, p in self.channels:
            if r == role:
                return p
        raise KeyError(Role(role).name)

    def stack(self):
        """All planes as a ``(c, h, w)`` float32 array."""
        return np.stack([p.astype(np.float32) for _, p in self.channels])

    @classmethod
    def from_label(cls, labels):
        labels = np.asarray(labels, dtype=np.uint8)
        return cls(labels.shape[0], labels.shape[1], [(Role.LABEL, labels)])


def encode_tile(tile):
    parts = [_HEADER.pack(MAGIC, VERSION, len(tile.channels), 0, tile.height, tile.width)]
    for role, plane in tile.channels:
        if role == Role.LABEL or plane.dtype == np.uint8:
            parts.append(struct.pack("<BB", int(role), 1))
            parts.append(np.ascontiguousarray(plane, dtype=np.uint8).tobytes())
        else:
            parts.append(struct.pack("<BB", int(role), 0))
            parts.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tile(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count, reserved, height, width = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if reserved != 0:
        raise FormatError("reserved field must be zero", 6)
    pos = _HEADER.size
    n_pix = height * width
    channels = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated channel header", pos)
        role, dtype = buf[pos], buf[pos + 1]
        try:
            role = Role(role)
        except ValueError:
            raise FormatError(f"unknown role code {role}", pos) from None
        if dtype not in (0, 1):
            raise FormatError(f"unknown dtype code {dtype}", pos + 1)
        pos += 2
        size = n_pix * (4 if dtype == 0 else 1)
        if pos + size > len(buf):
            raise FormatError(f"truncated {role.name} plane", len(buf))
        if dtype == 0:
            plane = np.frombuffer(buf, dtype="<f4", count=n_pix, offset=pos).astype(np.float32)
        else:
            plane = np.frombuffer(buf, dtype=np.uint8, count=n_pix, offset=pos).copy()
        channels.append((role, plane.reshape(height, width)))
        pos += size
    if pos != len(buf):
        raise FormatError("trailing bytes after last plane", pos)
    return RasterTile(height, width, channels)


def write_mrt(path, tile):
    data = encode_tile(tile)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_mrt(path):
    with open(path, "rb") as f:
        return decode_tile(f.read())


def compute_ndvi(ir, r):
    """Normalised difference vegetation index; 0 where ``ir + r == 0``."""
    ir = np.asarray(ir, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if ir.shape != r.shape:
        raise ShapeError(f"IR {ir.shape} and R {r.shape} differ")
    if np.any(ir < 0) or np.any(r < 0):
        raise DataError("reflectance values must be non-negative")
    total = ir + r
    out = np.divide(ir - r, total, out=np.zeros_like(total), where=total > 0)
    return out.astype(np.float32)


def minmax_scale(plane):
    """Scale to [0, 1] per tile; a constant plane maps to zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.float32)
    return ((plane - lo) / (hi - lo)).astype(np.float32)


def build_composite(dsm, ndsm, ndvi):
    """Stack (DSM, nDSM, NDVI) with the two height planes min-max scaled."""
    dsm, ndsm, ndvi = (np.asarray(p) for p in (dsm, ndsm, ndvi))
    if not dsm.shape == ndsm.shape == ndvi.shape:
        raise ShapeError(f"plane shapes differ: {dsm.shape}, {ndsm.shape}, {ndvi.shape}")
    tile = RasterTile(dsm.shape[0], dsm.shape[1])
    tile.add(Role.DSM, minmax_scale(dsm))
    tile.add(Role.NDSM, minmax_scale(ndsm))
    tile.add(Role.NDVI, ndvi.astype(np.float32))
    return tile


def optical_input(tile, scale=None):
    """Optical planes as network input in [0, 1].

    ``scale`` defaults to 255 when any value exceeds 1 (8-bit derived data)
    and to 1 otherwise.
    """
    x = np.stack([p for r, p in tile.channels if r in (Role.IR, Role.R, Role.G, Role.B)])
    if scale is None:
        scale = 255.0 if x.max(initial=0) > 1.0 else 1.0
    return (x / np.float32(scale)).astype(np.float32)


def composite_input(tile):
    order = (Role.DSM, Role.NDSM, Role.NDVI)
    return np.stack([tile.plane(r) for r in order]).astype(np.float32)
