import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilescale.grid import Grid
from tilescale.solar import (
    SolarConfig,
    SunPosition,
    cast_shadow,
    clear_sky_radiation,
    cloud_adjust,
    cloud_factor,
    declination,
    horizontal_clear_sky,
    skyview,
    sun_position,
)
from tilescale.terrain import TerrainDerivatives, slope_aspect

RES = 0.15


def flat_terrain(h=8, w=8):
    return TerrainDerivatives(Grid(np.zeros((h, w)), RES, "slope"), Grid(np.full((h, w), np.nan), RES, "aspect"))


def pillar_dsm(height=3.0, size=160, at=(140, 80)):
    z = np.zeros((size, size))
    z[at] = height
    return Grid(z, RES)


def test_equator_equinox_noon_zenith():
    sun = sun_position(SolarConfig(latitude=0.0, day_of_year=81, solar_time=12.0))
    assert sun.elevation == pytest.approx(math.pi / 2, abs=1e-9)


def test_solstice_declination():
    assert math.degrees(declination(172)) == pytest.approx(23.45, abs=0.01)


def test_midnight_below_horizon():
    assert sun_position(SolarConfig(latitude=31.35, day_of_year=172, solar_time=0.0)).elevation < 0


def test_morning_east_afternoon_west():
    am = sun_position(SolarConfig(solar_time=8.0))
    pm = sun_position(SolarConfig(solar_time=16.0))
    assert 0 < am.azimuth < math.pi
    assert math.pi < pm.azimuth < 2 * math.pi
    # symmetric about solar noon
    assert am.elevation == pytest.approx(pm.elevation, abs=1e-12)
    assert am.azimuth == pytest.approx(2 * math.pi - pm.azimuth, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        SolarConfig(day_of_year=0)
    with pytest.raises(ValueError):
        SolarConfig(atmospheric_transmittance=0.0)
    with pytest.raises(ValueError):
        SunPosition(elevation=2.0, azimuth=0.0)


def test_shadow_degenerate_elevations():
    dsm = pillar_dsm()
    assert np.all(cast_shadow(dsm, SunPosition(math.pi / 2, 0.0)).values == 0)
    assert np.all(cast_shadow(dsm, SunPosition(-0.1, 0.0)).values == 1)


def shadow_length_north(shade: np.ndarray, at) -> int:
    r, c = at
    n = 0
    while r - n - 1 >= 0 and shade[r - n - 1, c] == 1:
        n += 1
    return n


def test_pillar_shadow_45_degrees():
    at = (140, 80)
    shade = cast_shadow(pillar_dsm(at=at), SunPosition(math.radians(45), math.pi)).values
    # 3 m at 45 degrees: 3 m = 20 px
    assert abs(shadow_length_north(shade, at) - 20) <= 1
    # nothing south of the pillar
    assert shade[at[0] + 1 :, :].sum() == 0


@pytest.mark.parametrize("elev_deg", [20, 30, 40, 50, 60, 70])
def test_pillar_shadow_length(elev_deg):
    at = (140, 80)
    shade = cast_shadow(pillar_dsm(at=at), SunPosition(math.radians(elev_deg), math.pi)).values
    expected = 3.0 / math.tan(math.radians(elev_deg)) / RES
    assert abs(shadow_length_north(shade, at) - expected) <= 1


def test_flat_plane_skyview_is_one():
    svf = skyview(Grid(np.zeros((40, 40)), RES), max_radius_m=1.5).values
    assert np.max(np.abs(svf - 1.0)) < 1e-6


def test_single_obstacle_one_direction():
    z = np.zeros((30, 30))
    # one 45-degree obstacle due north at 4 px, seen by the 0-azimuth ray only
    z[11, 15] = 4 * RES
    svf = skyview(Grid(z, RES), n_azimuth=16, max_radius_m=2.0).values
    assert svf[15, 15] == pytest.approx(1 - math.sin(math.pi / 4) / 16, abs=1e-6)


def test_pit_skyview_near_zero():
    z = np.full((21, 21), 100.0)
    z[10, 10] = 0.0
    svf = skyview(Grid(z, RES), max_radius_m=1.0).values
    assert svf[10, 10] < 0.01


def test_flat_noon_radiation_value():
    cfg = SolarConfig(latitude=0.0, day_of_year=81, solar_time=12.0)
    t = flat_terrain()
    shade = Grid(np.zeros((8, 8)), RES)
    svf = Grid(np.ones((8, 8)), RES)
    rad = clear_sky_radiation(t, shade, svf, cfg).values
    assert rad[3, 3] == pytest.approx(1367 * 0.7 + 0.15 * 1367, abs=1e-3)
    assert horizontal_clear_sky(cfg) == pytest.approx(1161.95, abs=1e-6)


def test_shaded_pixel_gets_diffuse_only():
    cfg = SolarConfig(solar_time=10.0)
    t = flat_terrain(4, 4)
    shade = np.zeros((4, 4))
    shade[1, 1] = 1
    svf = Grid(np.full((4, 4), 0.8), RES)
    rad = clear_sky_radiation(t, Grid(shade, RES), svf, cfg).values.astype(np.float64)
    sun = sun_position(cfg)
    diffuse = 0.15 * 1367 * math.sin(sun.elevation) * 0.8
    assert rad[1, 1] == pytest.approx(diffuse, rel=1e-6)
    assert rad[1, 1] < rad[0, 0]


def test_night_radiation_zero():
    t = flat_terrain(4, 4)
    rad = clear_sky_radiation(t, Grid(np.ones((4, 4))), Grid(np.ones((4, 4))), SolarConfig(solar_time=0.0))
    assert np.all(rad.values == 0)


def test_cloud_adjust_examples():
    slope = Grid(np.zeros((3, 3)))
    rad = Grid(np.arange(9.0).reshape(3, 3) + 100)
    assert cloud_factor(rad, slope, 108.0) == 1.0
    assert np.array_equal(cloud_adjust(rad, slope, 108.0).values, rad.values)
    half = cloud_adjust(rad, slope, 54.0).values
    np.testing.assert_allclose(half, rad.values / 2, rtol=1e-7)
    night = Grid(np.zeros((3, 3)))
    assert cloud_factor(night, slope, 0.0) == 0.0
    assert np.all(cloud_adjust(night, slope, 0.0).values == 0)
    assert cloud_factor(rad, slope, 1000.0) == 1.5
    assert cloud_factor(rad, slope, 1000.0, cap=None) == pytest.approx(1000.0 / 108.0)


def test_cloud_adjust_errors():
    steep = Grid(np.full((3, 3), 0.5))
    rad = Grid(np.ones((3, 3)))
    with pytest.raises(ValueError, match="near-horizontal"):
        cloud_factor(rad, steep, 1.0)
    with pytest.raises(ValueError):
        cloud_factor(Grid(np.zeros((3, 3))), Grid(np.zeros((3, 3))), 10.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_obstruction_monotonicity(seed, bump):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0, 0.5, (24, 24))
    r, c = rng.integers(0, 24, 2)
    z2 = z.copy()
    z2[r, c] += bump
    g1, g2 = Grid(z, RES), Grid(z2, RES)
    s1 = skyview(g1, max_radius_m=1.5).values
    s2 = skyview(g2, max_radius_m=1.5).values
    others = np.ones_like(s1, dtype=bool)
    others[r, c] = False
    assert np.all(s2[others] <= s1[others] + 1e-6)
    sun = SunPosition(math.radians(rng.uniform(10, 80)), rng.uniform(0, 2 * math.pi))
    sh1 = cast_shadow(g1, sun, 3.0).values
    sh2 = cast_shadow(g2, sun, 3.0).values
    assert np.all(sh2[others] >= sh1[others])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_output_ranges(seed):
    rng = np.random.default_rng(seed)
    dsm = Grid(rng.uniform(0, 1, (20, 20)), RES)
    assert np.all(cast_shadow(dsm, SunPosition(math.pi / 2, 0.0)).values == 0)
    sun = SunPosition(math.radians(30), 1.0)
    shade = cast_shadow(dsm, sun, 2.0)
    assert set(np.unique(shade.values)) <= {0.0, 1.0}
    svf = skyview(dsm, max_radius_m=1.0)
    assert np.all((svf.values >= 0) & (svf.values <= 1))
    t = slope_aspect(dsm)
    rad = clear_sky_radiation(t, shade, svf, SolarConfig(solar_time=9.0)).values
    assert np.all(rad[np.isfinite(rad)] >= 0)
