"""Slope, aspect, object height and local slope variability from elevation grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, check_coregistered


@dataclass(frozen=True)
class TerrainDerivatives:
    """Slope in radians and aspect in radians clockwise from north.

    Aspect is the downslope direction and is NaN where the slope is exactly 0.
    """

    slope: Grid
    aspect: Grid


def horn_gradients(z: np.ndarray, resolution_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Horn 3x3 gradients (dz/d_east, dz/d_north) for interior pixels.

    Returned arrays have the input shape with a NaN border ring.
    """
    z = np.asarray(z, dtype=np.float64)
    #  a b c
    #  d e f
    #  g h i
    a, b, c = z[:-2, :-2], z[:-2, 1:-1], z[:-2, 2:]
    d, f = z[1:-1, :-2], z[1:-1, 2:]
    g, h, i = z[2:, :-2], z[2:, 1:-1], z[2:, 2:]
    dzdx = np.full(z.shape, np.nan)
    dzdy = np.full(z.shape, np.nan)
    dzdx[1:-1, 1:-1] = ((c + 2 * f + i) - (a + 2 * d + g)) / (8.0 * resolution_m)
    # row 0 is north, so north minus south
    dzdy[1:-1, 1:-1] = ((a + 2 * b + c) - (g + 2 * h + i)) / (8.0 * resolution_m)
    return dzdx, dzdy


def slope_aspect(dsm: Grid) -> TerrainDerivatives:
    if dsm.height < 3 or dsm.width < 3:
        raise ValueError(f"slope_aspect needs at least 3x3 pixels, got {dsm.width}x{dsm.height}")
    dzdx, dzdy = horn_gradients(dsm.values, dsm.resolution_m)
    slope = np.arctan(np.hypot(dzdx, dzdy))
    with np.errstate(invalid="ignore"):
        aspect = np.mod(np.arctan2(-dzdx, -dzdy), 2 * np.pi)
        aspect[slope == 0] = np.nan
    aspect = aspect.astype(np.float32)
    # float32 rounding can land on 2*pi
    aspect[aspect >= 2 * np.pi] = 0.0
    return TerrainDerivatives(
        slope=dsm.like(slope, name="slope"), aspect=dsm.like(aspect, name="aspect")
    )


def feature_height(dsm: Grid, dtm: Grid) -> Grid:
    """Object height above bare ground, clamped at zero."""
    check_coregistered([dsm, dtm], "dsm/dtm")
    diff = dsm.values.astype(np.float64) - dtm.values
    with np.errstate(invalid="ignore"):
        diff = np.where(diff < 0, 0.0, diff)
    return dsm.like(diff, name="height")


def disk_offsets(radius_px: float) -> np.ndarray:
    """Integer (drow, dcol) offsets whose centre distance is <= ``radius_px``."""
    r = int(np.floor(radius_px))
    dr, dc = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dr**2 + dc**2 <= radius_px**2
    return np.stack([dr[keep], dc[keep]], axis=1)


def slope_sd_radius(slope: Grid, radius_m: float = 2.0) -> Grid:
    """Population SD of slope over a disk of ``radius_m`` around each pixel.

    NaN-aware; pixels whose disk holds fewer than two valid values get NaN.
    """
    if not radius_m > 0:
        raise ValueError("radius_m must be positive")
    radius_px = radius_m / slope.resolution_m
    offsets = disk_offsets(radius_px)
    r = int(np.floor(radius_px))
    vals = slope.values.astype(np.float64)
    valid = np.isfinite(vals)
    padded = np.pad(np.where(valid, vals, 0.0), r)
    padded_valid = np.pad(valid.astype(np.float64), r)
    h, w = vals.shape
    count = np.zeros((h, w))
    total = np.zeros((h, w))
    for dr, dc in offsets:
        sl = (slice(r + dr, r + dr + h), slice(r + dc, r + dc + w))
        count += padded_valid[sl]
        total += padded[sl]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    # second pass about the local mean keeps the variance accurate
    sq = np.zeros((h, w))
    for dr, dc in offsets:
        sl = (slice(r + dr, r + dr + h), slice(r + dc, r + dc + w))
        dev = padded[sl] - mean
        sq += np.where(padded_valid[sl] > 0, dev * dev, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sd = np.sqrt(sq / count)
    sd[count < 2] = np.nan
    return slope.like(sd, name="slope_sd")
