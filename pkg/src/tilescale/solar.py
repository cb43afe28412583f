"""Solar geometry, clear-sky irradiance, cast shadows and skyview factor.

Azimuths are radians clockwise from north; grid row 0 is the northern edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid, check_coregistered
from .terrain import TerrainDerivatives

SHADOW_STEP_PX = 0.5
SHADOW_BIAS_M = 1e-3
NEAR_HORIZONTAL_RAD = math.radians(0.1)
MIN_SIN_ELEVATION = 0.01


@dataclass(frozen=True)
class SunPosition:
    elevation: float
    azimuth: float

    def __post_init__(self):
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        if not 0 <= self.azimuth < 2 * math.pi:
            raise ValueError(f"azimuth {self.azimuth} outside [0, 2pi)")


@dataclass(frozen=True)
class SolarConfig:
    latitude: float = 31.35
    day_of_year: int = 172
    solar_time: float = 12.0
    solar_constant: float = 1367.0
    atmospheric_transmittance: float = 0.70
    diffuse_fraction: float = 0.15

    def __post_init__(self):
        if not 1 <= self.day_of_year <= 366:
            raise ValueError(f"day_of_year {self.day_of_year} outside 1..366")
        if not -90 <= self.latitude <= 90:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not 0 < self.atmospheric_transmittance <= 1:
            raise ValueError("atmospheric_transmittance must be in (0, 1]")
        if not 0 <= self.diffuse_fraction < 1:
            raise ValueError("diffuse_fraction must be in [0, 1)")


def declination(day_of_year: int) -> float:
    """Cooper's declination in radians."""
    return math.radians(23.45) * math.sin(math.radians(360.0 * (284 + day_of_year) / 365.0))


def sun_position(cfg: SolarConfig) -> SunPosition:
    phi = math.radians(cfg.latitude)
    delta = declination(cfg.day_of_year)
    hour_angle = math.radians(15.0 * (cfg.solar_time - 12.0))
    sin_el = math.sin(phi) * math.sin(delta) + math.cos(phi) * math.cos(delta) * math.cos(hour_angle)
    elevation = math.asin(max(-1.0, min(1.0, sin_el)))
    # east component negative in the afternoon (H > 0) puts the sun in the west
    east = -math.cos(delta) * math.sin(hour_angle)
    north = math.sin(delta) * math.cos(phi) - math.cos(delta) * math.sin(phi) * math.cos(hour_angle)
    azimuth = math.atan2(east, north) % (2 * math.pi)
    if azimuth >= 2 * math.pi:
        azimuth = 0.0
    return SunPosition(elevation=elevation, azimuth=azimuth)


def _shifted(z: np.ndarray, drow: int, dcol: int, fill: float) -> np.ndarray:
    """out[r, c] = z[r + drow, c + dcol], ``fill`` outside the grid."""
    h, w = z.shape
    out = np.full_like(z, fill)
    if abs(drow) >= h or abs(dcol) >= w:
        return out
    src_r = slice(max(drow, 0), h + min(drow, 0))
    dst_r = slice(max(-drow, 0), h + min(-drow, 0))
    src_c = slice(max(dcol, 0), w + min(dcol, 0))
    dst_c = slice(max(-dcol, 0), w + min(-dcol, 0))
    out[dst_r, dst_c] = z[src_r, src_c]
    return out


def _ray_offsets(azimuth: float, distances_px: np.ndarray) -> list[tuple[float, int, int]]:
    """Nearest-pixel offsets along ``azimuth`` for each distance."""
    east, north = math.sin(azimuth), math.cos(azimuth)
    out = []
    for d in distances_px:
        dcol = int(math.floor(d * east + 0.5))
        drow = int(math.floor(-d * north + 0.5))
        if drow == 0 and dcol == 0:
            continue
        out.append((float(d), drow, dcol))
    return out


def cast_shadow(dsm: Grid, sun: SunPosition, max_distance_m: float = 15.0) -> Grid:
    """Binary cast-shadow map: 1 where the direct beam is blocked by the DSM.

    Each pixel marches toward the sun in half-pixel steps; it is shaded when a
    sample rises above the sloped sun ray. Samples off the grid never block.
    """
    if not max_distance_m > 0:
        raise ValueError("max_distance_m must be positive")
    h, w = dsm.shape
    if sun.elevation <= 0:
        return dsm.like(np.ones((h, w)), name="shade")
    if sun.elevation >= math.pi / 2 - 1e-12:
        return dsm.like(np.zeros((h, w)), name="shade")
    z = dsm.values.astype(np.float64)
    tan_el = math.tan(sun.elevation)
    max_px = max_distance_m / dsm.resolution_m
    distances = np.arange(1, int(math.floor(max_px / SHADOW_STEP_PX)) + 1) * SHADOW_STEP_PX
    shaded = np.zeros((h, w), dtype=bool)
    for d, drow, dcol in _ray_offsets(sun.azimuth, distances):
        sample = _shifted(z, drow, dcol, -np.inf)
        with np.errstate(invalid="ignore"):
            shaded |= sample > z + d * dsm.resolution_m * tan_el + SHADOW_BIAS_M
    return dsm.like(shaded.astype(np.float32), name="shade")


def skyview(
    dsm: Grid, n_azimuth: int = 16, max_radius_m: float = 10.0, step_px: float = 1.0
) -> Grid:
    """Skyview factor (1/n) * sum(1 - sin(horizon angle)) over ``n_azimuth`` directions."""
    if n_azimuth < 4:
        raise ValueError("n_azimuth must be >= 4")
    if not max_radius_m > 0:
        raise ValueError("max_radius_m must be positive")
    z = dsm.values.astype(np.float64)
    max_px = max_radius_m / dsm.resolution_m
    distances = np.arange(1, int(math.floor(max_px / step_px)) + 1) * step_px
    total = np.zeros(z.shape)
    for i in range(n_azimuth):
        az = 2 * math.pi * i / n_azimuth
        best = np.zeros(z.shape)
        for d, drow, dcol in _ray_offsets(az, distances):
            sample = _shifted(z, drow, dcol, -np.inf)
            with np.errstate(invalid="ignore"):
                np.fmax(best, (sample - z) / (d * dsm.resolution_m), out=best)
        # sin(atan(t)) = t / sqrt(1 + t^2)
        total += 1.0 - best / np.sqrt(1.0 + best * best)
    svf = total / n_azimuth
    svf[~np.isfinite(z)] = np.nan
    return dsm.like(np.clip(svf, 0.0, 1.0), name="skyview")


def direct_normal(cfg: SolarConfig, elevation: float) -> float:
    if elevation <= 0:
        return 0.0
    air_mass = 1.0 / max(math.sin(elevation), MIN_SIN_ELEVATION)
    return cfg.solar_constant * cfg.atmospheric_transmittance**air_mass


def horizontal_clear_sky(cfg: SolarConfig, sun: SunPosition | None = None) -> float:
    """Global clear-sky irradiance on an unobstructed horizontal surface."""
    sun = sun or sun_position(cfg)
    if sun.elevation <= 0:
        return 0.0
    s = math.sin(sun.elevation)
    return direct_normal(cfg, sun.elevation) * s + cfg.diffuse_fraction * cfg.solar_constant * s


def clear_sky_radiation(
    terrain: TerrainDerivatives, shade: Grid, svf: Grid, cfg: SolarConfig
) -> Grid:
    """Direct beam on the tilted surface plus isotropic diffuse scaled by skyview, W m-2."""
    check_coregistered([terrain.slope, terrain.aspect, shade, svf], "radiation inputs")
    sun = sun_position(cfg)
    slope = terrain.slope.values.astype(np.float64)
    if sun.elevation <= 0:
        out = np.where(np.isfinite(slope), 0.0, np.nan)
        return shade.like(out, name="radiation")
    aspect = np.nan_to_num(terrain.aspect.values.astype(np.float64), nan=0.0)
    sin_el, cos_el = math.sin(sun.elevation), math.cos(sun.elevation)
    cos_inc = np.cos(slope) * sin_el + np.sin(slope) * cos_el * np.cos(sun.azimuth - aspect)
    cos_inc = np.maximum(cos_inc, 0.0)
    beam = direct_normal(cfg, sun.elevation)
    direct = (1.0 - shade.values) * beam * cos_inc
    diffuse = cfg.diffuse_fraction * cfg.solar_constant * sin_el * svf.values
    rad = direct + diffuse
    with np.errstate(invalid="ignore"):
        rad = np.where(rad < 0, 0.0, rad)
    return shade.like(rad, name="radiation")


def cloud_factor(
    radiation: Grid, slope: Grid, measured_sg: float, cap: float | None = 1.5
) -> float:
    """Ratio of measured to maximum modelled radiation over near-horizontal pixels."""
    if measured_sg < 0:
        raise ValueError("measured_sg must be non-negative")
    check_coregistered([radiation, slope], "radiation/slope")
    flat = slope.values < NEAR_HORIZONTAL_RAD
    candidates = radiation.values[flat & np.isfinite(radiation.values)]
    if candidates.size == 0:
        raise ValueError("no near-horizontal pixel (slope < 0.1 deg) to calibrate against")
    peak = float(candidates.max())
    if peak == 0.0:
        if measured_sg > 0:
            raise ValueError("modelled radiation is zero but measured radiation is positive")
        return 0.0
    factor = measured_sg / peak
    if cap is not None:
        factor = min(factor, cap)
    return factor


def cloud_adjust(
    radiation: Grid, slope: Grid, measured_sg: float, cap: float | None = 1.5
) -> Grid:
    factor = cloud_factor(radiation, slope, measured_sg, cap)
    return radiation.like(radiation.values.astype(np.float64) * factor)
