import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilescale.features import MetVector, assemble_stack
from tilescale.grid import Grid
from tilescale.synth import (
    OracleConfig,
    WorldConfig,
    gaussian_blur,
    gen_flight,
    gen_terrain,
    load_scene,
    oracle_temperature,
    save_scene,
    spectral_noise,
)

FAST = dict(size=128, margin_px=16, skyview_radius_m=3.0, skyview_directions=8, shadow_distance_m=6.0)


def stack_from(arrs, res=0.15):
    return assemble_stack(*(Grid(np.asarray(a, dtype=np.float64), res) for a in arrs))


def random_stack(rng, n=48):
    return stack_from(
        [
            rng.uniform(100, 1000, (n, n)),
            (rng.random((n, n)) < 0.3).astype(float),
            rng.uniform(0.5, 1.0, (n, n)),
            rng.uniform(-0.1, 0.1, (n, n)),
            rng.exponential(0.2, (n, n)),
        ]
    )


def brute_blur(x, sigma):
    # direct 2-D convolution with a truncated, renormalised Gaussian and reflected edges
    r = int(4.0 * sigma + 0.5)
    t = np.arange(-r, r + 1)
    k1 = np.exp(-0.5 * (t / sigma) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    pad = np.pad(x, r, mode="symmetric")
    h, w = x.shape
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(pad[i : i + 2 * r + 1, j : j + 2 * r + 1] * k2)
    return out


def test_spectral_noise_normalised():
    f = spectral_noise(64, 2.0, np.random.default_rng(0))
    assert f.shape == (64, 64)
    assert abs(f.mean()) < 1e-9
    assert f.std() == pytest.approx(1.0, rel=1e-9)


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(size=64)
    with pytest.raises(ValueError):
        WorldConfig(rock_density=-1)
    with pytest.raises(ValueError):
        WorldConfig(rock_height_range=(1.0, 0.5))
    w = WorldConfig(seed=3)
    assert WorldConfig.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        OracleConfig(noise_sd=-0.1)


def test_bare_world_dsm_equals_dtm():
    dtm, dsm, _ = gen_terrain(WorldConfig(rock_density=0.0, vegetation_density=0.0, **FAST))
    assert np.array_equal(dtm.values, dsm.values)


def test_terrain_deterministic():
    a = gen_terrain(WorldConfig(seed=5, **FAST))
    b = gen_terrain(WorldConfig(seed=5, **FAST))
    c = gen_terrain(WorldConfig(seed=6, **FAST))
    assert a[1].bit_equal(b[1])
    assert not a[1].bit_equal(c[1])


def test_flight_outputs_and_vegetation():
    s = gen_flight(WorldConfig(seed=1, vegetation_density=0.05, **FAST), OracleConfig(), 10.0, "d0")
    assert s.shape == (128, 128)
    assert s.flight_id == "d0-s1-t1000"
    assert s.daypart == "midday"
    veg = s.stack["tgi"].values > np.float32(0.04)
    assert veg.any()
    for g in s.stack.grids:
        assert g.shape == s.shape


def test_same_geometry_across_times():
    w = WorldConfig(seed=2, **FAST)
    am = gen_flight(w, OracleConfig(), 6.5)
    noon = gen_flight(w, OracleConfig(), 12.0)
    assert am.dsm.bit_equal(noon.dsm)
    assert am.stack["skyview"].bit_equal(noon.stack["skyview"])
    assert am.daypart == "morning"
    # low sun casts more shade than noon sun
    assert noon.stack["shade"].values.mean() < am.stack["shade"].values.mean()


def test_scene_save_load(tmp_path):
    s = gen_flight(WorldConfig(seed=4, **FAST), OracleConfig(), 14.0, "d1")
    back = load_scene(save_scene(s, tmp_path / "scene"))
    assert back.flight_id == s.flight_id
    assert back.thermal.bit_equal(s.thermal)
    assert back.met == s.met
    for a, b in zip(back.stack.grids, s.stack.grids):
        assert a.bit_equal(b)


def test_blur_matches_direct_convolution():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 24))
    np.testing.assert_allclose(gaussian_blur(x, 1.5), brute_blur(x, 1.5), atol=1e-10)
    assert np.array_equal(gaussian_blur(x, 0.0), x)


def test_zero_radius_oracle_is_affine():
    rng = np.random.default_rng(1)
    stack = random_stack(rng)
    oc = OracleConfig(coupling_radius_m=0.0, noise_sd=0.0)
    met = MetVector(albedo=0.2)
    t = oracle_temperature(stack, oc, met).values
    a = stack.array().astype(np.float64)
    veg = (stack["tgi"].values > np.float32(0.04)).astype(float)
    expected = oc.c0 + oc.c1 * a[0] * 0.8 + oc.c2 * (1 - a[2]) + oc.c3 * a[1] + oc.c4 * veg
    # float32 storage
    np.testing.assert_allclose(t, expected, atol=1e-4)


def test_uniform_stack_gives_constant_field():
    n = 40
    stack = stack_from([np.full((n, n), 600.0), np.zeros((n, n)), np.full((n, n), 0.9), np.zeros((n, n)), np.zeros((n, n))])
    t = oracle_temperature(stack, OracleConfig(noise_sd=0.0), MetVector()).values
    assert np.ptp(t) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_linear_in_radiative_coefficient(a, b):
    stack = random_stack(np.random.default_rng(2), n=24)
    met = MetVector()

    def temp(c1):
        # float32 storage bounds the round-off
        return oracle_temperature(stack, OracleConfig(c1=c1, noise_sd=0.0), met).values

    base = temp(0.0)
    np.testing.assert_allclose(temp(a + b) - base, (temp(a) - base) + (temp(b) - base), atol=1e-4)


def test_coupling_is_local():
    # a radiation change further than 4 coupling radii away leaves the pixel unchanged
    n = 64
    rad = np.full((n, n), 500.0)
    arrs = [rad, np.zeros((n, n)), np.ones((n, n)), np.zeros((n, n)), np.zeros((n, n))]
    oc = OracleConfig(coupling_radius_m=0.3, noise_sd=0.0)
    base = oracle_temperature(stack_from(arrs), oc, MetVector()).values
    rad2 = rad.copy()
    rad2[32, 32 + 10] = 1000.0  # 10 px = 1.5 m > 4 * 0.3 m
    moved = oracle_temperature(stack_from([rad2] + arrs[1:]), oc, MetVector()).values
    assert moved[32, 32] == base[32, 32]
    assert moved[32, 41] > base[32, 41]


def test_noise_is_seeded_and_nan_propagates():
    rng = np.random.default_rng(3)
    stack = random_stack(rng, n=16)
    a = oracle_temperature(stack, OracleConfig(), MetVector(), seed=1)
    b = oracle_temperature(stack, OracleConfig(), MetVector(), seed=1)
    assert a.bit_equal(b)
    arrs = stack.array().astype(np.float64)
    arrs[4, 3, 3] = np.nan
    t = oracle_temperature(stack_from(arrs), OracleConfig(), MetVector()).values
    assert np.isnan(t[3, 3]) and np.isfinite(t).sum() == t.size - 1
