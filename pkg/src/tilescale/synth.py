"""Synthetic scenes with a ground-temperature oracle of known spatial coupling.

A world is a seeded terrain with rocks, shrubs and a flat station pad. A
flight renders the world at one solar time into the five feature layers and
a thermal map produced by :func:`oracle_temperature`.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import solar as solar_mod
from .features import (
    CHANNELS,
    VEGETATION_TGI,
    FeatureStack,
    MetVector,
    assemble_stack,
    tgi,
)
from .grid import Grid, crop_border, read_grid, write_grid
from .solar import SolarConfig
from .terrain import TerrainDerivatives, feature_height, slope_aspect

GROUND_RGB = (0.78, 0.66, 0.58)
ROCK_RGB = (0.55, 0.55, 0.55)
SHRUB_RGB = (0.25, 0.55, 0.20)
STATION_PAD_M = 2.0


@dataclass(frozen=True)
class WorldConfig:
    size: int = 256
    resolution_m: float = 0.15
    terrain_roughness: float = 4.0
    terrain_relief_m: float = 0.3
    rock_density: float = 0.2
    rock_height_range: tuple[float, float] = (0.2, 1.0)
    vegetation_density: float = 0.02
    solar: SolarConfig = field(default_factory=SolarConfig)
    met: MetVector = field(default_factory=MetVector)
    seed: int = 0
    margin_px: int = 32
    clearness: float = 1.0
    shadow_distance_m: float = 15.0
    skyview_radius_m: float = 10.0
    skyview_directions: int = 16

    def __post_init__(self):
        if self.size < 128:
            raise ValueError(f"world size must be >= 128, got {self.size}")
        if self.rock_density < 0 or self.vegetation_density < 0:
            raise ValueError("densities must be non-negative")
        lo, hi = self.rock_height_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid rock_height_range {self.rock_height_range}")
        if self.margin_px < 1:
            raise ValueError("margin_px must be >= 1")
        object.__setattr__(self, "rock_height_range", (float(lo), float(hi)))

    @property
    def full_size(self) -> int:
        return self.size + 2 * self.margin_px

    def geometry_key(self) -> tuple:
        return (
            self.size,
            self.resolution_m,
            self.terrain_roughness,
            self.terrain_relief_m,
            self.rock_density,
            self.rock_height_range,
            self.vegetation_density,
            self.seed,
            self.margin_px,
            self.skyview_radius_m,
            self.skyview_directions,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rock_height_range"] = list(self.rock_height_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "solar" in d and isinstance(d["solar"], dict):
            d["solar"] = SolarConfig(**d["solar"])
        if "met" in d and isinstance(d["met"], dict):
            d["met"] = MetVector(**d["met"])
        if "rock_height_range" in d:
            d["rock_height_range"] = tuple(d["rock_height_range"])
        return cls(**d)


@dataclass(frozen=True)
class OracleConfig:
    """Ground temperature = c0 + c1*blur(absorbed radiation) + c2*(1-skyview) + c3*shade + c4*veg + noise."""

    coupling_radius_m: float = 1.05
    c0: float = 30.0
    c1: float = 0.05
    c2: float = 8.0
    c3: float = -2.0
    c4: float = -4.0
    noise_sd: float = 0.3
    calibration_offset: float = 0.0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.coupling_radius_m < 0:
            raise ValueError("coupling_radius_m must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    dtm: Grid
    dsm: Grid
    rgb: tuple[Grid, Grid, Grid]
    stack: FeatureStack
    thermal: Grid
    met: MetVector
    solar_time: float
    flight_id: str
    day_id: str = ""
    seed: int = 0

    @property
    def daypart(self) -> str:
        from .dataset import daypart_of

        return daypart_of(self.solar_time)

    @property
    def resolution_m(self) -> float:
        return self.thermal.resolution_m

    @property
    def shape(self) -> tuple[int, int]:
        return self.thermal.shape


def spectral_noise(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean unit-SD field with power spectrum ~ f**-exponent."""
    white = rng.standard_normal((n, n))
    spec = np.fft.rfft2(white)
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = np.inf
    field_ = np.fft.irfft2(spec * f ** (-exponent / 2.0), s=(n, n))
    field_ -= field_.mean()
    return field_ / field_.std()


def _hillshade(z: np.ndarray, res: float, azimuth_deg=315.0, altitude_deg=45.0) -> np.ndarray:
    gy, gx = np.gradient(z, res)
    # gy is along increasing row (south); convert to northward slope
    dzdn = -gy
    slope = np.arctan(np.hypot(gx, dzdn))
    aspect = np.arctan2(-gx, -dzdn)
    az, alt = math.radians(azimuth_deg), math.radians(altitude_deg)
    shade = np.sin(alt) * np.cos(slope) + np.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def _place(
    base: np.ndarray,
    surface: np.ndarray,
    row: float,
    col: float,
    radius_px: float,
    profile,
    footprint: np.ndarray | None = None,
) -> None:
    n = base.shape[0]
    r0, r1 = max(int(row - radius_px), 0), min(int(row + radius_px) + 2, n)
    c0, c1 = max(int(col - radius_px), 0), min(int(col + radius_px) + 2, n)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    d = np.hypot(rr - row, cc - col) / radius_px
    inside = d < 1.0
    top = base[r0:r1, c0:c1] + profile(np.where(inside, d, 1.0))
    block = surface[r0:r1, c0:c1]
    np.copyto(block, np.maximum(block, top), where=inside)
    if footprint is not None:
        footprint[r0:r1, c0:c1] |= inside


def gen_terrain(cfg: WorldConfig) -> tuple[Grid, Grid, tuple[Grid, Grid, Grid]]:
    """Seeded DTM, DSM and RGB over the full extent (``size + 2*margin_px``)."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.full_size
    res = cfg.resolution_m
    dtm = spectral_noise(n, cfg.terrain_roughness, rng) * cfg.terrain_relief_m

    # flat pad for the met station, inside the retained area
    pad = max(int(round(STATION_PAD_M / res)), 5)
    lo = cfg.margin_px + 8
    hi = n - cfg.margin_px - 8 - pad
    pr, pc = (int(v) for v in rng.integers(lo, hi, size=2))
    pad_mask = np.zeros((n, n), dtype=bool)
    pad_mask[pr : pr + pad, pc : pc + pad] = True
    dtm[pad_mask] = dtm[pad_mask].mean()
    keep_clear = ndimage.binary_dilation(pad_mask, iterations=int(math.ceil(2.5 / res)))

    dsm = dtm.copy()
    rock_fp = np.zeros((n, n), dtype=bool)
    veg_fp = np.zeros((n, n), dtype=bool)
    area_m2 = (n * res) ** 2

    n_rocks = rng.poisson(cfg.rock_density * area_m2)
    h_lo, h_hi = cfg.rock_height_range
    rocks = np.column_stack(
        [
            rng.uniform(0, n, n_rocks),
            rng.uniform(0, n, n_rocks),
            rng.uniform(h_lo, h_hi, n_rocks),
            rng.uniform(1.0, 2.0, n_rocks),
        ]
    )
    for row, col, h, widen in rocks:
        if keep_clear[int(row), int(col)] or h <= 0:
            continue
        radius_px = max(h * widen / res, 1.0)
        _place(dtm, dsm, row, col, radius_px, lambda d, h=h: h * np.sqrt(1.0 - d * d), rock_fp)

    n_veg = rng.poisson(cfg.vegetation_density * area_m2)
    shrubs = np.column_stack(
        [
            rng.uniform(0, n, n_veg),
            rng.uniform(0, n, n_veg),
            rng.uniform(0.3, 0.8, n_veg),
            rng.uniform(0.2, 0.8, n_veg),
        ]
    )
    for row, col, radius_m, h in shrubs:
        if keep_clear[int(row), int(col)]:
            continue
        radius_px = max(radius_m / res, 1.5)
        _place(dtm, dsm, row, col, radius_px, lambda d, h=h: h * (1.0 - d * d), veg_fp)

    hs = _hillshade(dsm, res)
    brightness = (0.75 + 0.25 * hs) * (1.0 + 0.05 * rng.standard_normal((n, n)))
    rgb = np.empty((3, n, n))
    for i in range(3):
        colour = np.where(veg_fp, SHRUB_RGB[i], np.where(rock_fp, ROCK_RGB[i], GROUND_RGB[i]))
        rgb[i] = colour * brightness + 0.003 * rng.standard_normal((n, n))
    rgb = np.clip(rgb, 0.0, 1.0)

    names = ("red", "green", "blue")
    rgb_grids = tuple(Grid(rgb[i], res, names[i]) for i in range(3))
    return Grid(dtm, res, "dtm"), Grid(dsm, res, "dsm"), rgb_grids


def gaussian_blur(values: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian, reflective borders, truncated at 4 SD."""
    if sigma_px <= 0:
        return np.asarray(values, dtype=np.float64).copy()
    return ndimage.gaussian_filter(
        np.asarray(values, dtype=np.float64), sigma_px, mode="reflect", truncate=4.0
    )


def oracle_temperature(
    stack: FeatureStack, oc: OracleConfig, met: MetVector, seed=0
) -> Grid:
    """Ground temperature in degrees C with a known radiative coupling radius."""
    res = stack.resolution_m
    radiation = stack["radiation"].values.astype(np.float64)
    absorbed = radiation * (1.0 - met.albedo)
    coupled = gaussian_blur(absorbed, oc.coupling_radius_m / res)
    svf = stack["skyview"].values.astype(np.float64)
    shade = stack["shade"].values.astype(np.float64)
    with np.errstate(invalid="ignore"):
        veg = (stack["tgi"].values > np.float32(VEGETATION_TGI)).astype(np.float64)
    temp = (
        oc.c0
        + oc.calibration_offset
        + oc.c1 * coupled
        + oc.c2 * (1.0 - svf)
        + oc.c3 * shade
        + oc.c4 * veg
    )
    if oc.noise_sd > 0:
        rng = np.random.default_rng(seed)
        temp = temp + rng.normal(0.0, oc.noise_sd, temp.shape)
    invalid = np.zeros(temp.shape, dtype=bool)
    for g in stack.grids:
        invalid |= ~np.isfinite(g.values)
    temp[invalid] = np.nan
    return Grid(temp, res, "thermal")


@dataclass(frozen=True)
class _Geometry:
    dtm: Grid
    dsm: Grid
    rgb: tuple[Grid, Grid, Grid]
    terrain: TerrainDerivatives
    svf: Grid


@functools.lru_cache(maxsize=4)
def _geometry_cached(key: tuple, world: WorldConfig) -> _Geometry:
    dtm, dsm, rgb = gen_terrain(world)
    terrain = slope_aspect(dsm)
    svf = solar_mod.skyview(
        dsm, n_azimuth=world.skyview_directions, max_radius_m=world.skyview_radius_m
    )
    return _Geometry(dtm, dsm, rgb, terrain, svf)


def _geometry(world: WorldConfig) -> _Geometry:
    key = world.geometry_key()
    # solar and met fields do not affect geometry; normalise them for caching
    return _geometry_cached(key, replace(world, solar=SolarConfig(), met=MetVector()))


def flight_seed(world_seed: int, solar_time: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(world_seed) & 0xFFFFFFFFFFFFFFFF, int(round(solar_time * 3600))])


def make_flight_id(day_id: str, world_seed: int, solar_time: float) -> str:
    minutes = int(round(solar_time * 60))
    prefix = f"{day_id}-" if day_id else ""
    return f"{prefix}s{world_seed}-t{minutes // 60:02d}{minutes % 60:02d}"


def gen_flight(
    world: WorldConfig, oracle: OracleConfig, solar_time: float, day_id: str = ""
) -> SceneBundle:
    """Render one flight of ``world`` at ``solar_time`` (decimal hours)."""
    geo = _geometry(world)
    cfg = replace(world.solar, solar_time=float(solar_time))
    sun = solar_mod.sun_position(cfg)
    shade = solar_mod.cast_shadow(geo.dsm, sun, world.shadow_distance_m)
    clear = solar_mod.clear_sky_radiation(geo.terrain, shade, geo.svf, cfg)
    measured_sg = world.clearness * solar_mod.horizontal_clear_sky(cfg, sun)
    radiation = solar_mod.cloud_adjust(clear, geo.terrain.slope, measured_sg)
    veg_index = tgi(*geo.rgb)
    height = feature_height(geo.dsm, geo.dtm)

    m = world.margin_px
    crop = functools.partial(crop_border, margin=m)
    stack = assemble_stack(
        crop(radiation), crop(shade), crop(geo.svf), crop(veg_index), crop(height)
    )
    met = replace(world.met, S_g=float(measured_sg))
    thermal = oracle_temperature(stack, oracle, met, seed=flight_seed(world.seed, solar_time))
    return SceneBundle(
        dtm=crop(geo.dtm),
        dsm=crop(geo.dsm),
        rgb=tuple(crop(g) for g in geo.rgb),
        stack=stack,
        thermal=thermal,
        met=met,
        solar_time=float(solar_time),
        flight_id=make_flight_id(day_id, world.seed, solar_time),
        day_id=day_id,
        seed=world.seed,
    )


def save_scene(scene: SceneBundle, directory, extra: dict | None = None) -> Path:
    """Write a scene as MCG1 grids plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"dtm": scene.dtm, "dsm": scene.dsm, "thermal": scene.thermal}
    files.update(zip(("red", "green", "blue"), scene.rgb))
    files.update(zip(CHANNELS, scene.stack.grids))
    for name, grid in files.items():
        write_grid(grid, d / f"{name}.mcg")
    manifest = {
        "flight_id": scene.flight_id,
        "day_id": scene.day_id,
        "seed": scene.seed,
        "solar_time": scene.solar_time,
        "met": scene.met.to_dict(),
        "grids": sorted(f"{n}.mcg" for n in files),
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_scene(directory) -> SceneBundle:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())

    def g(name: str) -> Grid:
        return read_grid(d / f"{name}.mcg")

    stack = FeatureStack(tuple((c, g(c)) for c in CHANNELS))
    return SceneBundle(
        dtm=g("dtm"),
        dsm=g("dsm"),
        rgb=(g("red"), g("green"), g("blue")),
        stack=stack,
        thermal=g("thermal"),
        met=MetVector(**manifest["met"]),
        solar_time=float(manifest["solar_time"]),
        flight_id=manifest["flight_id"],
        day_id=manifest.get("day_id", ""),
        seed=int(manifest.get("seed", 0)),
    )
