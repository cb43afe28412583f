"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The spatial-scale run (criterion 4) trains five models on 512 px scenes and
takes tens of minutes on one core; criterion 5 reuses its outputs.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from tilescale import cli
from tilescale.ablation import mse
from tilescale.dataset import daypart_of, extract_tiles
from tilescale.features import MetVector, assemble_stack, fit_standardizer
from tilescale.grid import Grid, grid_from_bytes, grid_to_bytes, read_grid
from tilescale.nn.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from tilescale.nn.gradcheck import grad_check
from tilescale.nn.model import ModelConfig, init_params
from tilescale.solar import SunPosition, cast_shadow, skyview
from tilescale.synth import SceneBundle, load_scene
from tilescale.terrain import slope_aspect, slope_sd_radius

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RES = 0.15


# --- 1. gradient fidelity -------------------------------------------------

def test_criterion_1_gradient_fidelity(record_acceptance):
    t0 = time.perf_counter()
    report = grad_check(precision="f64", seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in report.results)
    groups = " ".join(r.layer for r in report.results)
    covered = all(name in groups for name in ("conv", "rectifier", "pool", "linear", "residual block", "met-concat"))
    ok = report.passed and elapsed < 60 and covered
    record_acceptance(1, ok, f"{len(report.results)} checks (conv, rectifier, pool, residual block, linear, met-concat), max rel err {worst:.2e} < 1e-4, {elapsed:.1f} s")
    assert report.passed, report.lines()
    assert covered
    assert elapsed < 60


# --- 2. geometry oracles --------------------------------------------------

def _brute_sd(vals, radius_px):
    h, w = vals.shape
    r = int(radius_px)
    out = np.full((h, w), np.nan)
    for i in range(h):
        for j in range(w):
            win = [
                vals[i + di, j + dj]
                for di in range(-r, r + 1)
                for dj in range(-r, r + 1)
                if di * di + dj * dj <= radius_px * radius_px
                and 0 <= i + di < h and 0 <= j + dj < w and np.isfinite(vals[i + di, j + dj])
            ]
            if len(win) >= 2:
                out[i, j] = np.std(win)
    return out


def test_criterion_2_geometry_oracles(record_acceptance):
    failures = []
    at = (140, 80)
    z = np.zeros((160, 160))
    z[at] = 3.0
    worst_shadow = 0.0
    for deg in range(20, 71, 5):
        shade = cast_shadow(Grid(z, RES), SunPosition(math.radians(deg), math.pi)).values
        n = 0
        while shade[at[0] - n - 1, at[1]] == 1:
            n += 1
        err = abs(n - 3.0 / math.tan(math.radians(deg)) / RES)
        worst_shadow = max(worst_shadow, err)
    if worst_shadow > 1:
        failures.append("shadow")

    flat = skyview(Grid(np.zeros((40, 40)), RES), max_radius_m=1.5).values
    flat_err = float(np.max(np.abs(flat - 1)))
    wall = np.zeros((30, 30))
    wall[11, 15] = 4 * RES  # 45 degrees, due north
    svf = skyview(Grid(wall, RES), n_azimuth=16, max_radius_m=2.0).values[15, 15]
    wall_err = abs(svf - (1 - math.sin(math.pi / 4) / 16))

    rows, cols = np.mgrid[0:7, 0:7]
    plane = Grid(0.1 * cols * RES + 0.05 * (6 - rows) * RES, RES)
    slope = slope_aspect(plane).slope.values[1:-1, 1:-1].astype(np.float64)
    slope_err = float(np.max(np.abs(slope - math.atan(math.hypot(0.1, 0.05)))))

    rng = np.random.default_rng(2024)
    sd_err = 0.0
    for _ in range(3):
        vals = rng.uniform(0, 1.2, (32, 32))
        got = slope_sd_radius(Grid(vals, RES), 0.6).values
        ref = _brute_sd(vals, 0.6 / RES)
        ok = np.isfinite(ref)
        sd_err = max(sd_err, float(np.max(np.abs(got[ok] - ref[ok]))))
    for name, err, tol in (("flat svf", flat_err, 1e-6), ("wall svf", wall_err, 1e-6), ("slope", slope_err, 1e-6), ("slope sd", sd_err, 1e-6)):
        if err >= tol:
            failures.append(name)
    detail = (f"shadow max err {worst_shadow:.2f} px, flat svf {flat_err:.1e}, wall svf {wall_err:.1e}, "
              f"slope {slope_err:.1e} rad, slope sd {sd_err:.1e}")
    record_acceptance(2, not failures, detail)
    assert not failures, detail


# --- 3. pipeline arithmetic -----------------------------------------------

def _scene(h, w, seed):
    rng = np.random.default_rng(seed)
    chans = [
        rng.uniform(100, 900, (h, w)),
        (rng.random((h, w)) < 0.3).astype(float),
        rng.uniform(0.5, 1.0, (h, w)),
        rng.uniform(-0.1, 0.03, (h, w)),
        rng.exponential(0.2, (h, w)),
    ]
    stack = assemble_stack(*(Grid(c, RES) for c in chans))
    z = Grid(np.zeros((h, w)), RES)
    thermal = Grid(rng.normal(35, 3, (h, w)), RES)
    return SceneBundle(dtm=z, dsm=z, rgb=(z, z, z), stack=stack, thermal=thermal, met=MetVector(),
                       solar_time=10.0, flight_id=f"s{seed}", seed=seed)


def test_criterion_3_pipeline_arithmetic(record_acceptance):
    scene = _scene(1000, 1000, 0)
    std = fit_standardizer([(scene.stack, scene.met, scene.thermal)])
    z = std.transform_stack(scene.stack)
    mismatches = []
    for k in (9, 15, 21, 31, 47, 63, 81):
        for stride in (1, 11):
            # brute-force enumeration of admissible window centres along one axis
            per_axis = sum(1 for p in range(1000) if p >= k // 2 and p + k // 2 <= 999 and (p - k // 2) % stride == 0)
            n = len(extract_tiles(scene, std, k, stride, standardized=z.astype(np.float32)))
            if n != per_axis**2:
                mismatches.append((k, stride, n, per_axis**2))

    e = np.random.default_rng(1).normal(0, 4, 1000)
    acc = math.fsum(float(x) ** 2 for x in e) / len(e)
    mse_rel = abs(mse(e) - acc) / acc

    scenes = [_scene(300, 300, s) for s in (1, 2, 3)]
    std2 = fit_standardizer([(s.stack, s.met, s.thermal) for s in scenes])
    zz = np.concatenate([std2.transform_stack(s.stack).reshape(5, -1) for s in scenes], axis=1)
    mean_err = float(np.max(np.abs(zz.mean(axis=1))))
    sd_err = float(np.max(np.abs(zz.std(axis=1) - 1)))

    ok = not mismatches and mse_rel <= 1e-9 and mean_err < 1e-6 and sd_err < 1e-6
    record_acceptance(3, ok, f"14 tile counts exact={not mismatches}, mse rel err {mse_rel:.1e}, "
                             f"|mean| {mean_err:.1e}, |sd-1| {sd_err:.1e}")
    assert not mismatches, mismatches
    assert mse_rel <= 1e-9 and mean_err < 1e-6 and sd_err < 1e-6


# --- 4. spatial-scale recovery --------------------------------------------

def _sweep(config: Path, out: Path) -> tuple[dict, float]:
    t0 = time.perf_counter()
    code = cli.main(["sweep", "--config", str(config), "--out", str(out), "--threads", "1"])
    elapsed = time.perf_counter() - t0
    assert code == 0, f"sweep exited with {code}"
    return json.loads((out / "report.json").read_text()), elapsed


@pytest.fixture(scope="module")
def scale_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    report, elapsed = _sweep(CONFIGS / "acceptance.json", out)
    return out, report, elapsed


@pytest.mark.slow
def test_criterion_4_spatial_scale_recovery(scale_run, tmp_path_factory, record_acceptance):
    out, rep, elapsed = scale_run
    cfg = json.loads((CONFIGS / "acceptance.json").read_text())
    assert rep["sizes"] == [9, 15, 21, 31, 47]
    assert cfg["oracle"]["coupling_radius_m"] / RES == pytest.approx(7.0)
    assert cfg["sweep"]["epochs"] >= 30
    assert len(rep["train_flights"]) == 6 and len(rep["test_flights"]) == 2
    m = {int(k): v for k, v in rep["mse_by_size"].items()}
    ratio = m[31] / m[9]
    sat = rep["saturation"]["pixels"]

    neg, neg_elapsed = _sweep(CONFIGS / "negative_control.json", tmp_path_factory.mktemp("negative"))
    nm = {int(k): v for k, v in neg["mse_by_size"].items()}
    neg_ratio = nm[47] / nm[9]

    ok_a = ratio <= 0.5
    ok_b = 15 <= sat <= 31
    ok_t = elapsed <= 3600
    ok_n = neg_ratio >= 0.8
    curve = ", ".join(f"{k}:{v:.3f}" for k, v in sorted(m.items()))
    record_acceptance(4, ok_a and ok_b and ok_t and ok_n,
                      f"MSE {{{curve}}}; (a) MSE31/MSE9 = {ratio:.3f} <= 0.5; (b) saturation {sat} px in [15, 31]; "
                      f"sweep {elapsed / 60:.1f} min <= 60; R_c=0 control MSE47/MSE9 = {neg_ratio:.3f} >= 0.8 "
                      f"({neg_elapsed / 60:.1f} min)")
    assert ok_a, f"MSE(31)/MSE(9) = {ratio:.3f}"
    assert ok_b, f"saturation at {sat} px"
    assert ok_t, f"sweep took {elapsed / 60:.1f} min"
    assert ok_n, f"negative control ratio {neg_ratio:.3f}"


# --- 5. stratification integrity ------------------------------------------

@pytest.mark.slow
def test_criterion_5_stratification_integrity(scale_run, record_acceptance):
    out, rep, _ = scale_run
    scenes = {fid: load_scene(out / "scenes" / fid) for fid in rep["test_flights"]}
    worst_rel, partition_ok = 0.0, True
    for k in rep["sizes"]:
        values, n_open, n_shade = [], 0, 0
        for fid, scene in scenes.items():
            se = read_grid(out / "se_grids" / f"{fid}_k{k}.mcg").values.astype(np.float64)
            valid = np.isfinite(se)
            shade = scene.stack["shade"].values > 0.5
            n_open += int(np.sum(valid & ~shade))
            n_shade += int(np.sum(valid & shade))
            values.append(se[valid])
        total = sum(v.size for v in values)
        cells = [c for c in rep["strata"] if c["size"] == k]
        rep_open = sum(c["n"] for c in cells if c["microhabitat"] == "open")
        rep_shade = sum(c["n"] for c in cells if c["microhabitat"] == "shade")
        partition_ok &= rep_open == n_open and rep_shade == n_shade and n_open + n_shade == total
        partition_ok &= rep["counts_by_size"][str(k)] == total
        direct = math.fsum(float(x) for v in values for x in v) / total
        weighted = math.fsum(c["mse"] * c["n"] for c in cells) / sum(c["n"] for c in cells)
        worst_rel = max(worst_rel, abs(weighted - direct) / direct, abs(rep["mse_by_size"][str(k)] - direct) / direct)

    bands = {6.0: "morning", 6.5: "morning", 7.0: "morning", 8.0: "midday", 12.0: "midday", 16.0: "midday",
             17.0: "evening", 17.5: "evening", 18.0: "evening"}
    bands_ok = all(daypart_of(t) == d for t, d in bands.items())
    for t in (5.9, 7.5, 16.5, 18.5):
        with pytest.raises(ValueError):
            daypart_of(t)
    ok = partition_ok and worst_rel <= 1e-9 and bands_ok
    record_acceptance(5, ok, f"open+shade = valid centres at every size: {partition_ok}; weighted-mean rel err "
                             f"{worst_rel:.1e} <= 1e-9; daypart bands exact: {bands_ok}")
    assert ok


# --- 6. determinism --------------------------------------------------------

def _artifacts(root: Path) -> dict[str, bytes]:
    files = {}
    for sub in ("datasets", "checkpoints"):
        for f in sorted((root / sub).rglob("*")):
            if f.is_file():
                files[str(f.relative_to(root))] = f.read_bytes()
    files["report.json"] = (root / "report.json").read_bytes()
    return files


def test_criterion_6_determinism(tmp_path, record_acceptance):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["sweep", "--config", str(CONFIGS / "smoke.json"), "--out", str(out), "--threads", "1"])
        assert code == 0
        runs.append(_artifacts(out))
    a, b = runs
    shards = sum(1 for n in a if n.endswith(".f32"))
    ckpts = sum(1 for n in a if n.endswith(".ckpt"))
    same = a.keys() == b.keys() and all(a[n] == b[n] for n in a)
    record_acceptance(6, same and shards > 0 and ckpts > 0,
                      f"{len(a)} files ({shards} shards, {ckpts} checkpoints, report.json) bit-identical: {same}")
    assert same, [n for n in a if a.get(n) != b.get(n)]
    assert shards > 0 and ckpts > 0


# --- 7. format round-trips ---------------------------------------------------

def test_criterion_7_format_roundtrips(tmp_path, record_acceptance):
    rng = np.random.default_rng(7)
    grid_ok = True
    for i in range(25):
        h, w = rng.integers(1, 40, 2)
        vals = rng.normal(0, 100, (h, w)).astype(np.float32)
        bits = vals.view(np.uint32)
        nan_mask = rng.random((h, w)) < 0.1
        # quiet NaNs with random payloads, plus infinities
        bits[nan_mask] = 0x7FC00000 | rng.integers(0, 1 << 22, int(nan_mask.sum()), dtype=np.uint32)
        if h * w > 2:
            vals.reshape(-1)[0] = np.inf
            vals.reshape(-1)[1] = -np.inf
        g = Grid(vals, float(rng.uniform(0.01, 2)), f"g{i}")
        back = grid_from_bytes(grid_to_bytes(g))
        grid_ok &= back.values.view(np.uint32).tobytes() == vals.view(np.uint32).tobytes()
        grid_ok &= back.resolution_m == g.resolution_m and back.name == g.name

    ckpt_ok = True
    for i, (prec, bn) in enumerate((("f32", False), ("f32", True), ("f64", False), ("f64", True))):
        cfg = ModelConfig(stem_width=4, stage_widths=(4, 8), use_batchnorm=bn, precision=prec)
        p = init_params(cfg, int(rng.choice([9, 15, 21])), seed=i)
        for w in list(p.weights.values()) + list(p.buffers.values()):
            w[...] = rng.standard_normal(w.shape)
            w.reshape(-1)[0] = np.nan
        path = tmp_path / f"m{i}.ckpt"
        save_checkpoint(path, p, cfg, {"i": i})
        q, cfg2, meta = load_checkpoint(path)
        ckpt_ok &= cfg2 == cfg and meta == {"i": i}
        for name in p.weights:
            ckpt_ok &= p.weights[name].tobytes() == q.weights[name].tobytes()
        for name in p.buffers:
            ckpt_ok &= p.buffers[name].tobytes() == q.buffers[name].tobytes()
        ckpt_ok &= checkpoint_bytes(q, cfg2, meta) == path.read_bytes()
    record_acceptance(7, grid_ok and ckpt_ok, f"25 random MCG1 grids with NaN payloads bit-exact: {grid_ok}; "
                                              f"4 random checkpoints bit-exact: {ckpt_ok}")
    assert grid_ok and ckpt_ok
