"""Command-line entry point: ``tilescale <subcommand> [flags]``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 stage failure. Logs are JSON lines on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig

logger = logging.getLogger("tilescale")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if hasattr(record, "stage"):
            entry["stage"] = record.stage
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration JSON")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--seed", type=_u64, help="global seed (overrides the config)")
    common.add_argument("--threads", type=_positive, default=1, help="BLAS threads; 1 is deterministic (default)")
    common.add_argument("--sizes", type=_csv_ints, metavar="CSV", help="tile sizes, e.g. 9,31")
    common.add_argument("--epochs", type=int, metavar="N", help="training epochs per size")
    common.add_argument("--dense-eval", action="store_true", help="evaluate every pixel instead of the eval grid")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="tilescale", description="Tile-size ablation for thermal mapping CNNs.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate synthetic flights")
    sub.add_parser("features", parents=[common], help="fit the standardizer on training flights")
    sub.add_parser("dataset", parents=[common], help="write tile shards per size")
    sub.add_parser("train", parents=[common], help="train one model per size")
    sub.add_parser("sweep", parents=[common], help="end-to-end sweep: synth (if needed), train, evaluate, report")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--precision", choices=("f64", "f32"), default="f64")
    sub.add_parser("report", parents=[common], help="print a summary of an existing report.json")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    try:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        sweep = cfg.sweep
        if args.sizes is not None:
            sweep = replace(sweep, tile_sizes=args.sizes)
        if args.epochs is not None:
            sweep = replace(sweep, epochs=args.epochs)
        if args.dense_eval:
            sweep = replace(sweep, dense_eval=True)
        cfg = replace(cfg, sweep=sweep)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return cfg


def _stage(name: str):
    """Decorator-free helper: run ``fn`` and wrap failures as :class:`StageError`."""

    def run(fn, *a, **kw):
        t0 = time.perf_counter()
        logger.info("stage %s started", name, extra={"stage": name})
        try:
            result = fn(*a, **kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        logger.info("stage %s finished in %.1f s", name, time.perf_counter() - t0, extra={"stage": name})
        return result

    return run


def _hash_dir(d: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(d)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def cmd_synth(cfg: RunConfig) -> list[dict]:
    """Generate every (day, time) flight and write ``scenes/`` plus ``flights.json``."""
    from .synth import gen_flight, save_scene

    scenes_dir = Path(cfg.out) / "scenes"
    index = []
    test_days = set(cfg.test_days)
    for day in cfg.days:
        world = cfg.world_for(day)
        for t in cfg.flight_times:
            scene = gen_flight(world, cfg.oracle, t, day_id=day.day_id)
            d = save_scene(scene, scenes_dir / scene.flight_id, {"clearness": day.clearness})
            index.append({
                "flight_id": scene.flight_id,
                "day_id": day.day_id,
                "seed": day.seed,
                "solar_time": t,
                "daypart": scene.daypart,
                "split": "test" if day.day_id in test_days else "train",
                "content_hash": _hash_dir(d),
            })
            logger.info("wrote flight %s", scene.flight_id)
    (Path(cfg.out) / "flights.json").write_text(json.dumps({"flights": index}, indent=2, sort_keys=True))
    return index


def _load_scenes(cfg: RunConfig, generate: bool):
    from .synth import load_scene

    out = Path(cfg.out)
    index_path = out / "flights.json"
    if not index_path.exists():
        if not generate:
            raise FileNotFoundError(f"{index_path} not found; run `tilescale synth` first")
        _stage("synth")(cmd_synth, cfg)
    index = json.loads(index_path.read_text())["flights"]
    train, test = [], []
    for entry in index:
        scene = load_scene(out / "scenes" / entry["flight_id"])
        (test if entry["split"] == "test" else train).append(scene)
    if not train or not test:
        raise ValueError("flights.json must list both training and test flights")
    return train, test


def cmd_features(cfg: RunConfig):
    from .features import fit_standardizer

    train, _ = _load_scenes(cfg, generate=False)
    std = fit_standardizer([(s.stack, s.met, s.thermal) for s in train])
    (Path(cfg.out) / "standardizer.json").write_text(std.to_json())
    return std


def _standardizer(cfg: RunConfig, train):
    from .features import Standardizer, fit_standardizer

    path = Path(cfg.out) / "standardizer.json"
    if path.exists():
        return Standardizer.from_json(path.read_text())
    std = fit_standardizer([(s.stack, s.met, s.thermal) for s in train])
    path.write_text(std.to_json())
    return std


def cmd_dataset(cfg: RunConfig) -> None:
    from .dataset import build_tileset, split_train_val, standardize_scenes, write_dataset

    train, test = _load_scenes(cfg, generate=False)
    std = _standardizer(cfg, train)
    sw = cfg.sweep
    z_tr, z_te = standardize_scenes(train, std), standardize_scenes(test, std)
    for k in sw.tile_sizes:
        m = sw.margin(k)
        tiles = build_tileset(train, std, k, sw.stride, m, z_tr)
        tr, va = split_train_val(tiles, sw.train_fraction, sw.seeds[0])
        te = build_tileset(test, std, k, sw.stride, m, z_te)
        manifest = write_dataset(Path(cfg.out) / "datasets" / f"k{k}", {"train": tr, "val": va, "test": te}, std, sw.stride)
        logger.info("dataset k=%d: %d train, %d val, %d test tiles", k, len(tr), len(va), len(te))
        logger.debug("content hash %s", manifest["content_hash"])


def cmd_train(cfg: RunConfig) -> None:
    from .dataset import build_tileset, split_train_val, standardize_scenes
    from .nn.estimator import TileCNNRegressor

    train, _ = _load_scenes(cfg, generate=False)
    std = _standardizer(cfg, train)
    sw = cfg.sweep
    z_tr = standardize_scenes(train, std)
    for k in sw.tile_sizes:
        tiles = build_tileset(train, std, k, sw.stride, sw.margin(k), z_tr)
        for seed in sw.seeds:
            tr, va = split_train_val(tiles, sw.train_fraction, seed)
            d = Path(cfg.out) / "checkpoints" / f"k{k}_s{seed}"
            est = TileCNNRegressor.from_config(
                cfg.model, epochs=sw.epochs, batch_size=sw.batch_size, lr=sw.lr, seed=seed,
                checkpoint_dir=d, keep_every_epoch=sw.keep_every_epoch,
            ).fit_tiles(tr.arrays(), va.arrays())
            est.save(d / "best.ckpt", {"tile_size": k, "seed": seed, "best_epoch": est.history_.best_epoch})
            est.history_.to_csv(d / "history.csv")
            logger.info("trained k=%d seed=%d best epoch %s", k, seed, est.history_.best_epoch)


def cmd_sweep(cfg: RunConfig):
    from .ablation import run_sweep

    out = Path(cfg.out)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    train, test = _stage("load")(_load_scenes, cfg, True)
    report = _stage("sweep")(run_sweep, cfg.sweep, train, test, cfg.model, out)
    for k in report.sizes:
        logger.info("k=%d mse=%.5f n=%d", k, report.mse_by_size[k], report.counts_by_size[k])
    if report.saturation is not None:
        logger.info("saturation at %d px (%.2f m)", report.saturation.pixels, report.saturation.meters)
    return report


def cmd_gradcheck(precision: str, seed: int) -> int:
    from .nn.gradcheck import grad_check

    report = grad_check(seed=seed, precision=precision)
    for line in report.lines():
        print(line)
    print(f"gradcheck {precision}: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_report(cfg: RunConfig) -> None:
    path = Path(cfg.out) / "report.json"
    rep = json.loads(path.read_text())
    res = rep["resolution_m"]
    print(f"status: {rep['status']}")
    print(f"{'size_px':>8} {'size_m':>7} {'mse':>10} {'n':>8}")
    for k in rep["sizes"]:
        print(f"{k:>8d} {k * res:>7.2f} {rep['mse_by_size'][str(k)]:>10.4f} {rep['counts_by_size'][str(k)]:>8d}")
    sat = rep.get("saturation")
    if sat:
        flag = " (no saturation inside range)" if sat["at_upper_bound"] else ""
        print(f"saturation: {sat['pixels']} px = {sat['meters']:.2f} m{flag}")
    for note in rep.get("notes", []):
        print(f"note: {note}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    limiter = threadpool_limits(limits=args.threads) if threadpool_limits else None
    try:
        if args.command == "gradcheck":
            seed = 0 if args.seed is None else args.seed
            return cmd_gradcheck(args.precision, seed)
        cfg = resolve_config(args)
        run = _stage(args.command)
        if args.command == "synth":
            run(cmd_synth, cfg)
        elif args.command == "features":
            run(cmd_features, cfg)
        elif args.command == "dataset":
            run(cmd_dataset, cfg)
        elif args.command == "train":
            run(cmd_train, cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg)
        elif args.command == "report":
            run(cmd_report, cfg)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config error: %s", exc, extra={"stage": "config"})
        return EXIT_CONFIG
    except StageError as exc:
        logger.error("%s", exc, extra={"stage": exc.stage})
        return EXIT_STAGE
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
