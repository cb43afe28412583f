"""Tile-size sweep: train one model per size, evaluate held-out scenes, stratify errors."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .dataset import (
    DAYPARTS,
    DEFAULT_STRIDE,
    MICROHABITATS,
    build_tileset,
    split_train_val,
    standardize_scenes,
    window_positions,
    write_dataset,
)
from .features import Standardizer, fit_standardizer
from .grid import Grid, write_grid
from .nn.estimator import TileCNNRegressor
from .nn.model import ModelConfig
from .synth import SceneBundle
from .terrain import slope_aspect, slope_sd_radius

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (9, 15, 21, 31, 47, 63, 81)
CURVE_FEATURES = ("radiation", "skyview", "tgi", "slope_sd_2m")
TERCILES = ("low", "intermediate", "high")


class TilePredictor(Protocol):
    tile_size_: int

    def predict_tiles(self, tiles: np.ndarray, met: np.ndarray) -> np.ndarray: ...


class SweepError(RuntimeError):
    """A tile size failed; ``partial`` holds the report written so far."""

    def __init__(self, size: int, cause: BaseException, partial: "SweepReport"):
        super().__init__(f"sweep failed at tile size {size}: {cause}")
        self.size = size
        self.partial = partial


def mse(errors) -> float:
    """Mean of squared errors."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("mse of an empty error list")
    return float(np.sum(e * e) / e.size)


def _valid_centres(scene: SceneBundle, std_threshold: float, margin: int) -> np.ndarray:
    """Bare-ground, finite, interior pixels (with windows of half-width ``margin``)."""
    h, w = scene.shape
    ok = np.zeros((h, w), dtype=bool)
    ok[margin : h - margin, margin : w - margin] = True
    with np.errstate(invalid="ignore"):
        ok &= ~(scene.stack["tgi"].values > np.float32(std_threshold))
    ok &= np.isfinite(scene.thermal.values)
    for g in scene.stack.grids:
        ok &= np.isfinite(g.values)
    return ok


def _predict_at(model: TilePredictor, z: np.ndarray, std: Standardizer, scene: SceneBundle, rows, cols) -> np.ndarray:
    """Predictions (centred degrees C) for tiles centred at ``rows``/``cols``."""
    from .dataset import TileView

    k = int(model.tile_size_)
    view = TileView([z], np.zeros(len(rows), dtype=np.int64), rows, cols, k)
    met = np.tile(std.transform_met(scene.met), (len(rows), 1))
    out = np.empty(len(rows), dtype=np.float64)
    for start in range(0, len(rows), 1024):
        idx = np.arange(start, min(start + 1024, len(rows)))
        out[idx] = model.predict_tiles(view[idx], met[idx])
    return out


def evaluate_scene(
    model: TilePredictor,
    scene: SceneBundle,
    std: Standardizer,
    k: int,
    eval_stride: int = 4,
    margin: int | None = None,
    standardized: np.ndarray | None = None,
) -> Grid:
    """Squared-error grid: (prediction - truth)^2 at evaluated centres, NaN elsewhere.

    Centres lie on an ``eval_stride`` lattice starting at ``margin``
    (default ``k // 2``) and exclude vegetated pixels.
    """
    if int(model.tile_size_) != int(k):
        raise ValueError(f"model tile size {model.tile_size_} does not match k={k}")
    m = k // 2 if margin is None else int(margin)
    h, w = scene.shape
    rr, cc = np.meshgrid(window_positions(h, k, eval_stride, m), window_positions(w, k, eval_stride, m), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    ok = _valid_centres(scene, std.vegetation_threshold, k // 2)[rr, cc]
    rr, cc = rr[ok], cc[ok]
    z = standardized if standardized is not None else std.transform_stack(scene.stack).astype(np.float32)
    se = np.full((h, w), np.nan, dtype=np.float64)
    if rr.size:
        pred = _predict_at(model, z, std, scene, rr, cc)
        truth = std.transform_label(scene.thermal.values[rr, cc].astype(np.float64))
        se[rr, cc] = (pred - truth) ** 2
    return Grid(se, scene.resolution_m, f"se_k{k}_{scene.flight_id}")


@dataclass
class StratumCell:
    size: int
    microhabitat: str
    daypart: str
    sse: float
    n: int

    @property
    def mse(self) -> float:
        return self.sse / self.n


def stratified_mse(se_grids: dict[tuple[int, str], Grid], scenes: Sequence[SceneBundle]) -> list[StratumCell]:
    """Per (size, microhabitat, daypart) sums of squared error and pixel counts.

    ``se_grids`` is keyed by ``(tile size, flight id)``. Empty strata are
    absent from the result rather than reported as zero.
    """
    by_id = {s.flight_id: s for s in scenes}
    acc: dict[tuple[int, str, str], list] = {}
    for (k, fid), grid in sorted(se_grids.items()):
        if fid not in by_id:
            raise KeyError(f"no scene metadata for flight {fid!r}")
        scene = by_id[fid]
        se = np.asarray(grid.values, dtype=np.float64)
        valid = np.isfinite(se)
        shade = scene.stack["shade"].values > 0.5
        for mi, name in enumerate(MICROHABITATS):
            sel = valid & (shade if mi == 1 else ~shade)
            n = int(sel.sum())
            if n == 0:
                continue
            cell = acc.setdefault((k, name, scene.daypart), [0.0, 0])
            cell[0] += float(np.sum(se[sel]))
            cell[1] += n
    order = {m: i for i, m in enumerate(MICROHABITATS)}
    dorder = {d: i for i, d in enumerate(DAYPARTS)}
    keys = sorted(acc, key=lambda t: (t[0], order[t[1]], dorder[t[2]]))
    return [StratumCell(k, m, d, acc[(k, m, d)][0], acc[(k, m, d)][1]) for k, m, d in keys]


def overall_mse(cells: Sequence[StratumCell], size: int) -> tuple[float, int]:
    """Count-weighted mean of stratum MSEs for one size."""
    sel = [c for c in cells if c.size == size]
    n = sum(c.n for c in sel)
    if n == 0:
        raise ValueError(f"no evaluated pixels for size {size}")
    return sum(c.mse * c.n for c in sel) / n, n


class Saturation(NamedTuple):
    pixels: int
    meters: float
    at_upper_bound: bool


def saturation_scale(mse_by_size: dict[int, float], epsilon: float = 0.05, resolution_m: float = 0.15) -> Saturation:
    """Smallest size whose MSE is within ``(1 + epsilon)`` of the best size.

    ``at_upper_bound`` flags a curve still dropping by more than epsilon at
    the largest size, i.e. no saturation inside the tested range.
    """
    if len(mse_by_size) < 3:
        raise ValueError("saturation needs at least 3 tile sizes")
    sizes = sorted(mse_by_size)
    vals = np.array([mse_by_size[k] for k in sizes], dtype=np.float64)
    if not np.all(vals > 0):
        raise ValueError("MSE values must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    limit = (1.0 + epsilon) * vals.min()
    k = next(s for s, v in zip(sizes, vals) if v <= limit)
    at_bound = k == sizes[-1] and vals[-2] > (1.0 + epsilon) * vals[-1]
    return Saturation(int(k), float(k * resolution_m), bool(at_bound))


def sample_eval_points(scene: SceneBundle, n: int = 20, margin: int = 0, threshold: float = 0.04) -> list[tuple[int, int]]:
    """Roughly uniform lattice of ``n`` points snapped to the nearest valid pixel.

    The lattice has ``floor(sqrt(n))`` rows; columns are added until it holds
    ``n`` points, and cells are filled row by row.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    valid = _valid_centres(scene, threshold, margin)
    if int(valid.sum()) < n:
        raise ValueError(f"only {int(valid.sum())} valid pixels for {n} points")
    h, w = scene.shape
    n_rows = max(1, math.isqrt(n))
    n_cols = math.ceil(n / n_rows)
    span_r, span_c = h - 2 * margin, w - 2 * margin
    # nearest valid pixel for every location
    _, (near_r, near_c) = ndimage.distance_transform_edt(~valid, return_indices=True)
    points = []
    for i in range(n):
        r_i, c_i = divmod(i, n_cols)
        cols_here = min(n_cols, n - r_i * n_cols)
        r = margin + int((r_i + 0.5) * span_r / n_rows)
        c = margin + int((c_i + 0.5) * span_c / cols_here)
        points.append((int(near_r[r, c]), int(near_c[r, c])))
    return points


def point_features(scene: SceneBundle, points: Sequence[tuple[int, int]]) -> dict[str, np.ndarray]:
    """Raw radiation, skyview, TGI and 2 m slope SD at each point."""
    rr = np.array([p[0] for p in points])
    cc = np.array([p[1] for p in points])
    slope_sd = slope_sd_radius(slope_aspect(scene.dsm).slope, 2.0).values
    out = {name: scene.stack[name].values[rr, cc].astype(np.float64) for name in ("radiation", "skyview", "tgi")}
    out["slope_sd_2m"] = slope_sd[rr, cc].astype(np.float64)
    return out


@dataclass
class CurveRow:
    feature: str
    tercile: str
    size: int
    mse: float
    n: int


def feature_error_curves(
    features: dict[str, np.ndarray], se_by_size: dict[int, np.ndarray]
) -> tuple[list[CurveRow], list[str]]:
    """Mean squared error per feature tercile and tile size.

    Points are ranked by feature value (ties in input order) and split into
    three groups whose sizes differ by at most one. Returns the rows and the
    names of features whose values are all identical (degenerate terciles).
    """
    rows: list[CurveRow] = []
    degenerate: list[str] = []
    for name, values in features.items():
        v = np.asarray(values, dtype=np.float64)
        if v.size < 3 * 3:
            raise ValueError(f"feature {name!r}: need at least 3 points per tercile, got {v.size} points")
        finite = np.isfinite(v)
        if not finite.all():
            raise ValueError(f"feature {name!r} has non-finite values at sample points")
        if np.ptp(v) == 0:
            degenerate.append(name)
        groups = np.array_split(np.argsort(v, kind="stable"), 3)
        for k in sorted(se_by_size):
            se = np.asarray(se_by_size[k], dtype=np.float64)
            for t, idx in zip(TERCILES, groups):
                rows.append(CurveRow(name, t, int(k), float(np.mean(se[idx])), int(idx.size)))
    return rows, degenerate


@dataclass(frozen=True)
class SweepConfig:
    tile_sizes: tuple[int, ...] = DEFAULT_SIZES
    stride: int = DEFAULT_STRIDE
    epochs: int = 100
    seeds: tuple[int, ...] = (0,)
    eval_grid_stride: int = 4
    dense_eval: bool = False
    train_fraction: float = 0.8
    batch_size: int = 64
    lr: float = 1e-4
    epsilon: float = 0.05
    n_eval_points: int = 20
    common_centres: bool = True
    write_datasets: bool = True
    keep_every_epoch: bool = False

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.tile_sizes)
        if not sizes:
            raise ValueError("tile_sizes is empty")
        if any(k % 2 == 0 or k < 1 for k in sizes):
            raise ValueError(f"tile sizes must be odd and positive: {sizes}")
        if list(sizes) != sorted(set(sizes)):
            raise ValueError(f"tile sizes must be strictly ascending: {sizes}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.stride < 1 or self.eval_grid_stride < 1 or self.epochs < 0:
            raise ValueError("stride, eval_grid_stride must be >= 1 and epochs >= 0")
        object.__setattr__(self, "tile_sizes", sizes)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def eval_stride(self) -> int:
        return 1 if self.dense_eval else self.eval_grid_stride

    def margin(self, k: int) -> int:
        return max(self.tile_sizes) // 2 if self.common_centres else k // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tile_sizes"] = list(self.tile_sizes)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        return cls(**d)


@dataclass
class SweepReport:
    config: dict
    model: dict
    resolution_m: float
    train_flights: list[str]
    test_flights: list[str]
    standardizer_fingerprint: str
    sizes: list[int] = field(default_factory=list)
    mse_by_size: dict[int, float] = field(default_factory=dict)
    mse_sd_by_size: dict[int, float] = field(default_factory=dict)
    mse_by_seed: dict[int, list[float]] = field(default_factory=dict)
    counts_by_size: dict[int, int] = field(default_factory=dict)
    train_tiles: dict[int, int] = field(default_factory=dict)
    best_epochs: dict[int, list[int | None]] = field(default_factory=dict)
    strata: list[StratumCell] = field(default_factory=list)
    curves: list[CurveRow] = field(default_factory=list)
    degenerate_features: list[str] = field(default_factory=list)
    saturation: Saturation | None = None
    notes: list[str] = field(default_factory=list)
    status: str = "running"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "config": self.config,
            "model": self.model,
            "resolution_m": self.resolution_m,
            "train_flights": self.train_flights,
            "test_flights": self.test_flights,
            "standardizer_fingerprint": self.standardizer_fingerprint,
            "sizes": self.sizes,
            "mse_by_size": {str(k): v for k, v in self.mse_by_size.items()},
            "mse_sd_by_size": {str(k): v for k, v in self.mse_sd_by_size.items()},
            "mse_by_seed": {str(k): v for k, v in self.mse_by_seed.items()},
            "counts_by_size": {str(k): v for k, v in self.counts_by_size.items()},
            "train_tiles": {str(k): v for k, v in self.train_tiles.items()},
            "best_epochs": {str(k): v for k, v in self.best_epochs.items()},
            "strata": [{**asdict(c), "mse": c.mse} for c in self.strata],
            "feature_curves": [asdict(r) for r in self.curves],
            "degenerate_features": self.degenerate_features,
            "saturation": None
            if self.saturation is None
            else {
                "pixels": self.saturation.pixels,
                "meters": self.saturation.meters,
                "at_upper_bound": self.saturation.at_upper_bound,
                "epsilon": self.config.get("epsilon"),
            },
            "notes": self.notes,
        }


def write_report(report: SweepReport, out_dir) -> None:
    """report.json plus the three CSV tables."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    with open(d / "mse_by_size.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size_px", "size_m", "mse", "mse_sd", "n"])
        for k in report.sizes:
            w.writerow([k, repr(k * report.resolution_m), repr(report.mse_by_size[k]),
                        repr(report.mse_sd_by_size[k]), report.counts_by_size[k]])
    with open(d / "strata.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "microhabitat", "daypart", "mse", "n"])
        for c in report.strata:
            w.writerow([c.size, c.microhabitat, c.daypart, repr(c.mse), c.n])
    with open(d / "feature_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "tercile", "size", "mse", "n"])
        for r in report.curves:
            w.writerow([r.feature, r.tercile, r.size, repr(r.mse), r.n])


def run_sweep(
    cfg: SweepConfig,
    train_scenes: Sequence[SceneBundle],
    test_scenes: Sequence[SceneBundle],
    model_cfg: ModelConfig | None = None,
    out_dir=None,
) -> SweepReport:
    """Train and evaluate one model per tile size (and seed).

    With several seeds, squared errors are averaged over seeds pixelwise, so
    every reported MSE is the seed-mean MSE. Results are written after each
    size; a failing size raises :class:`SweepError` with the partial report
    already on disk.
    """
    model_cfg = model_cfg or ModelConfig()
    train_scenes, test_scenes = list(train_scenes), list(test_scenes)
    if not train_scenes or not test_scenes:
        raise ValueError("run_sweep needs training and test scenes")
    overlap = {s.flight_id for s in train_scenes} & {s.flight_id for s in test_scenes}
    if overlap:
        raise ValueError(f"flights in both training and test sets: {sorted(overlap)}")
    min_side = min(min(s.shape) for s in train_scenes + test_scenes)
    if max(cfg.tile_sizes) > min_side:
        raise ValueError(f"tile size {max(cfg.tile_sizes)} exceeds the smallest scene side {min_side}")
    out = Path(out_dir) if out_dir is not None else None

    std = fit_standardizer([(s.stack, s.met, s.thermal) for s in train_scenes])
    z_train = standardize_scenes(train_scenes, std)
    z_test = standardize_scenes(test_scenes, std)
    report = SweepReport(
        config=cfg.to_dict(),
        model=model_cfg.to_dict(),
        resolution_m=float(test_scenes[0].resolution_m),
        train_flights=[s.flight_id for s in train_scenes],
        test_flights=[s.flight_id for s in test_scenes],
        standardizer_fingerprint=std.fingerprint(),
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "standardizer.json").write_text(std.to_json())

    # feature-curve points are shared across sizes
    pmargin = max(cfg.tile_sizes) // 2
    points = {s.flight_id: sample_eval_points(s, cfg.n_eval_points, pmargin, std.vegetation_threshold) for s in test_scenes}
    feats: dict[str, list] = {f: [] for f in CURVE_FEATURES}
    for s in test_scenes:
        for name, v in point_features(s, points[s.flight_id]).items():
            feats[name].append(v)
    feats_arr = {f: np.concatenate(v) for f, v in feats.items()}
    point_se: dict[int, np.ndarray] = {}
    se_grids: dict[tuple[int, str], Grid] = {}

    for k in cfg.tile_sizes:
        try:
            _sweep_size(cfg, k, model_cfg, std, train_scenes, test_scenes, z_train, z_test, points,
                        out, report, se_grids, point_se)
        except Exception as exc:
            report.status = "failed"
            report.notes.append(f"size {k} failed: {type(exc).__name__}: {exc}")
            if out is not None:
                write_report(report, out)
            raise SweepError(k, exc, report) from exc
        report.strata = stratified_mse(se_grids, test_scenes)
        report.curves, report.degenerate_features = feature_error_curves(feats_arr, point_se)
        if out is not None:
            write_report(report, out)

    if len(report.sizes) >= 3:
        report.saturation = saturation_scale(report.mse_by_size, cfg.epsilon, report.resolution_m)
        if report.saturation.at_upper_bound:
            report.notes.append("no saturation inside the tested size range")
    else:
        report.notes.append("fewer than 3 sizes: no saturation estimate")
    report.status = "complete"
    if out is not None:
        write_report(report, out)
    return report


def _sweep_size(cfg, k, model_cfg, std, train_scenes, test_scenes, z_train, z_test, points,
                out, report, se_grids, point_se) -> None:
    margin = cfg.margin(k)
    tiles = build_tileset(train_scenes, std, k, cfg.stride, margin, z_train)
    if len(tiles) == 0:
        raise ValueError(f"no training tiles at k={k}")
    seed_mse, best_epochs = [], []
    se_sum = {s.flight_id: None for s in test_scenes}
    pse_sum = None
    for seed in cfg.seeds:
        train, val = split_train_val(tiles, cfg.train_fraction, seed)
        if out is not None and cfg.write_datasets and seed == cfg.seeds[0]:
            test_tiles = build_tileset(test_scenes, std, k, cfg.stride, margin, z_test)
            write_dataset(out / "datasets" / f"k{k}", {"train": train, "val": val, "test": test_tiles}, std, cfg.stride)
        ckpt_dir = out / "checkpoints" / f"k{k}_s{seed}" if out is not None else None
        est = TileCNNRegressor.from_config(
            model_cfg,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            seed=seed,
            checkpoint_dir=ckpt_dir,
            keep_every_epoch=cfg.keep_every_epoch,
        )
        est.fit_tiles(train.arrays(), val.arrays())
        if ckpt_dir is not None:
            est.save(ckpt_dir / "best.ckpt", {"tile_size": k, "seed": seed, "best_epoch": est.history_.best_epoch})
            est.history_.to_csv(ckpt_dir / "history.csv")
        best_epochs.append(est.history_.best_epoch)
        total_se, total_n = 0.0, 0
        for s, z in zip(test_scenes, z_test):
            g = evaluate_scene(est, s, std, k, cfg.eval_stride, margin, z)
            v = g.values.astype(np.float64)
            se_sum[s.flight_id] = v if se_sum[s.flight_id] is None else se_sum[s.flight_id] + v
            fin = np.isfinite(v)
            total_se += float(v[fin].sum())
            total_n += int(fin.sum())
        seed_mse.append(total_se / total_n)
        pse = []
        for s, z in zip(test_scenes, z_test):
            rr = np.array([p[0] for p in points[s.flight_id]])
            cc = np.array([p[1] for p in points[s.flight_id]])
            pred = _predict_at(est, z, std, s, rr, cc)
            truth = std.transform_label(s.thermal.values[rr, cc].astype(np.float64))
            pse.append((pred - truth) ** 2)
        pse = np.concatenate(pse)
        pse_sum = pse if pse_sum is None else pse_sum + pse
        logger.info("size %d seed %d test mse %.5f (best epoch %s)", k, seed, seed_mse[-1], est.history_.best_epoch)

    n_seeds = len(cfg.seeds)
    if out is not None:
        (out / "se_grids").mkdir(parents=True, exist_ok=True)
    for s in test_scenes:
        grid = Grid(se_sum[s.flight_id] / n_seeds, s.resolution_m, f"se_k{k}_{s.flight_id}")
        se_grids[(k, s.flight_id)] = grid
        if out is not None:
            write_grid(grid, out / "se_grids" / f"{s.flight_id}_k{k}.mcg")
    point_se[k] = pse_sum / n_seeds
    report.sizes.append(k)
    cells = stratified_mse(
        {key: g for key, g in se_grids.items() if key[0] == k}, test_scenes
    )
    report.mse_by_size[k], report.counts_by_size[k] = overall_mse(cells, k)
    report.mse_by_seed[k] = seed_mse
    report.mse_sd_by_size[k] = float(np.std(seed_mse))
    report.train_tiles[k] = len(tiles)
    report.best_epochs[k] = best_epochs


__all__ = [
    "CURVE_FEATURES",
    "DEFAULT_SIZES",
    "CurveRow",
    "Saturation",
    "StratumCell",
    "SweepConfig",
    "SweepError",
    "SweepReport",
    "evaluate_scene",
    "feature_error_curves",
    "mse",
    "overall_mse",
    "point_features",
    "run_sweep",
    "sample_eval_points",
    "saturation_scale",
    "stratified_mse",
    "write_report",
]
