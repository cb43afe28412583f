"""Raster container, the MCG1 on-disk format, and basic geometric operations.

MCG1 layout::

    bytes 0-3   b"MCG1"
    bytes 4-7   little-endian u32 header length L
    bytes 8..   UTF-8 JSON header {"width", "height", "resolution_m", "name"}
    then        width*height little-endian float32, row-major, row 0 = top
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence, Union

import numpy as np

MAGIC = b"MCG1"
DEFAULT_RESOLUTION_M = 0.15
# Largest raster the reader accepts; guards against absurd headers.
MAX_PIXELS = 1 << 31

PathOrFile = Union[str, os.PathLike, BinaryIO]


class GridFormatError(ValueError):
    """Raised when an MCG1 stream is malformed."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Single-channel float32 raster. NaN marks nodata.

    ``values`` is stored as a read-only ``(height, width)`` float32 array.
    """

    values: np.ndarray
    resolution_m: float = DEFAULT_RESOLUTION_M
    name: str = ""

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"grid values must be 2-D, got shape {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("grid must have positive width and height")
        if not (self.resolution_m > 0 and np.isfinite(self.resolution_m)):
            raise ValueError(f"resolution_m must be positive, got {self.resolution_m}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "resolution_m", float(self.resolution_m))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def like(self, values: np.ndarray, name: str | None = None) -> "Grid":
        """New grid with the same resolution and the given values."""
        return Grid(values, self.resolution_m, self.name if name is None else name)

    def same_geometry(self, other: "Grid") -> bool:
        return self.shape == other.shape and self.resolution_m == other.resolution_m

    def bit_equal(self, other: "Grid") -> bool:
        return (
            self.same_geometry(other)
            and self.name == other.name
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        return f"Grid({self.width}x{self.height}, {self.resolution_m} m/px, name={self.name!r})"


def check_coregistered(grids: Sequence[Grid], what: str = "grids") -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise ValueError(
                f"{what} are not co-registered: {first.shape}@{first.resolution_m} "
                f"vs {g.shape}@{g.resolution_m}"
            )


@dataclass(frozen=True)
class GridStack:
    """Ordered, co-registered named channels."""

    channels: tuple[tuple[str, Grid], ...] = field(default_factory=tuple)

    def __post_init__(self):
        chans = tuple((str(n), g) for n, g in self.channels)
        if not chans:
            raise ValueError("a stack needs at least one channel")
        names = [n for n, _ in chans]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names: {names}")
        check_coregistered([g for _, g in chans], "stack channels")
        object.__setattr__(self, "channels", chans)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.channels]

    @property
    def grids(self) -> list[Grid]:
        return [g for _, g in self.channels]

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels[0][1].shape

    @property
    def resolution_m(self) -> float:
        return self.channels[0][1].resolution_m

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self) -> Iterator[tuple[str, Grid]]:
        return iter(self.channels)

    def __getitem__(self, name: str) -> Grid:
        for n, g in self.channels:
            if n == name:
                return g
        raise KeyError(name)

    def array(self) -> np.ndarray:
        """(channels, height, width) float32 copy."""
        return np.stack([g.values for g in self.grids])


def _header_bytes(grid: Grid) -> bytes:
    header = {
        "width": grid.width,
        "height": grid.height,
        "resolution_m": grid.resolution_m,
        "name": grid.name,
    }
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def grid_to_bytes(grid: Grid) -> bytes:
    header = _header_bytes(grid)
    payload = grid.values.astype("<f4", copy=False).tobytes(order="C")
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def grid_from_bytes(data: bytes) -> Grid:
    if len(data) < 8:
        raise GridFormatError("truncated MCG1 preamble")
    if data[:4] != MAGIC:
        raise GridFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise GridFormatError("truncated MCG1 header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
        width = int(header["width"])
        height = int(header["height"])
        res = float(header["resolution_m"])
        name = str(header.get("name", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise GridFormatError(f"invalid MCG1 header: {exc}") from exc
    if width <= 0 or height <= 0 or width >= 1 << 32 or height >= 1 << 32:
        raise GridFormatError(f"invalid dimensions {width}x{height}")
    if width * height > MAX_PIXELS:
        raise GridFormatError(f"dimensions {width}x{height} overflow the reader limit")
    start = 8 + hlen
    need = width * height * 4
    if len(data) - start < need:
        raise GridFormatError(
            f"truncated payload: {len(data) - start} bytes, expected {need}"
        )
    values = np.frombuffer(data, dtype="<f4", count=width * height, offset=start)
    try:
        return Grid(values.reshape(height, width), res, name)
    except ValueError as exc:
        raise GridFormatError(str(exc)) from exc


def write_grid(grid: Grid, destination: PathOrFile) -> int:
    """Write ``grid`` as MCG1 and return the number of bytes written."""
    blob = grid_to_bytes(grid)
    if hasattr(destination, "write"):
        destination.write(blob)
    else:
        Path(destination).write_bytes(blob)
    return len(blob)


def read_grid(source: PathOrFile) -> Grid:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    return grid_from_bytes(data)


def crop_border(grid: Grid, margin: int) -> Grid:
    """Drop ``margin`` pixels from every edge."""
    margin = int(margin)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if 2 * margin >= min(grid.width, grid.height):
        raise ValueError(f"margin {margin} leaves nothing of a {grid.width}x{grid.height} grid")
    if margin == 0:
        return grid
    return grid.like(grid.values[margin:-margin, margin:-margin])


def resample_block_mean(grid: Grid, factor: int) -> Grid:
    """Aggregate ``factor x factor`` blocks by their NaN-ignoring mean."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if grid.width % factor or grid.height % factor:
        raise ValueError(
            f"{grid.width}x{grid.height} is not divisible by resampling factor {factor}"
        )
    if factor == 1:
        return grid
    h, w = grid.height // factor, grid.width // factor
    blocks = grid.values.astype(np.float64).reshape(h, factor, w, factor)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.nanmean(blocks, axis=(1, 3))
    return Grid(out, grid.resolution_m * factor, grid.name)
