"""Sliding-window tile datasets, splits, strata and binary shards."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import CHANNELS, N_MET, STACK_VERSION, Standardizer
from .synth import SceneBundle

logger = logging.getLogger(__name__)

DEFAULT_STRIDE = 11
DAYPARTS = ("morning", "midday", "evening")
MICROHABITATS = ("open", "shade")
_BANDS = (("morning", 6.0, 7.0), ("midday", 8.0, 16.0), ("evening", 17.0, 18.0))
# per-record trailer after the inputs and met values
TRAILER = ("label", "row", "col", "scene", "daypart", "microhabitat")


def daypart_of(solar_time: float) -> str:
    """Morning 6-7 h, midday 8-16 h, evening 17-18 h (inclusive bands)."""
    if not 0 <= solar_time < 24:
        raise ValueError(f"solar time {solar_time} outside [0, 24)")
    for name, lo, hi in _BANDS:
        if lo <= solar_time <= hi:
            return name
    raise ValueError(f"solar time {solar_time} falls outside the morning/midday/evening bands")


def record_length(k: int) -> int:
    return len(CHANNELS) * k * k + N_MET + len(TRAILER)


class TileView:
    """Lazy (n, 5, k, k) view gathering windows from standardized scene arrays."""

    def __init__(self, scenes: Sequence[np.ndarray], scene_idx, rows, cols, k: int):
        self.scenes = list(scenes)
        self.scene_idx = np.asarray(scene_idx, dtype=np.int64)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.k = int(k)
        self.dtype = self.scenes[0].dtype if self.scenes else np.dtype(np.float32)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (len(self), len(CHANNELS), self.k, self.k)

    @property
    def ndim(self) -> int:
        return 4

    def astype(self, dtype, copy: bool = True) -> "TileView":
        if np.dtype(dtype) == self.dtype and not copy:
            return self
        return TileView([s.astype(dtype) for s in self.scenes], self.scene_idx, self.rows, self.cols, self.k)

    def __getitem__(self, idx) -> np.ndarray:
        idx = np.arange(len(self))[idx] if isinstance(idx, slice) else np.asarray(idx)
        scalar = idx.ndim == 0
        idx = np.atleast_1d(idx)
        h = self.k // 2
        out = np.empty((idx.size, len(CHANNELS), self.k, self.k), dtype=self.dtype)
        sidx = self.scene_idx[idx]
        for s in np.unique(sidx):
            sel = np.flatnonzero(sidx == s)
            win = sliding_window_view(self.scenes[s], (self.k, self.k), axis=(1, 2))
            r = self.rows[idx[sel]] - h
            c = self.cols[idx[sel]] - h
            out[sel] = win[:, r, c].transpose(1, 0, 2, 3)
        return out[0] if scalar else out

    def __array__(self, dtype=None, copy=None):
        arr = self[np.arange(len(self))]
        return arr if dtype is None else arr.astype(dtype)

    def subset(self, idx) -> "TileView":
        idx = np.asarray(idx)
        return TileView(self.scenes, self.scene_idx[idx], self.rows[idx], self.cols[idx], self.k)


@dataclass(frozen=True)
class TileRecord:
    inputs: np.ndarray  # (5, k, k) standardized
    met: np.ndarray  # (8,) standardized
    label: float  # centred degrees C
    center: tuple[int, int]
    flight_id: str
    daypart: str
    microhabitat: str


@dataclass
class TileSet:
    """Columnar tile collection; indexing yields :class:`TileRecord`."""

    tiles: TileView
    met: np.ndarray
    labels: np.ndarray
    flight_ids: list[str]
    dayparts: np.ndarray  # index into DAYPARTS
    microhabitat: np.ndarray  # 0 open, 1 shade

    @property
    def k(self) -> int:
        return self.tiles.k

    @property
    def centers(self) -> np.ndarray:
        return np.stack([self.tiles.rows, self.tiles.cols], axis=1)

    @property
    def scene_index(self) -> np.ndarray:
        return self.tiles.scene_idx

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> TileRecord:
        s = int(self.tiles.scene_idx[i])
        return TileRecord(
            inputs=self.tiles[i],
            met=self.met[i],
            label=float(self.labels[i]),
            center=(int(self.tiles.rows[i]), int(self.tiles.cols[i])),
            flight_id=self.flight_ids[s],
            daypart=DAYPARTS[int(self.dayparts[i])],
            microhabitat=MICROHABITATS[int(self.microhabitat[i])],
        )

    def record_flights(self) -> list[str]:
        return [self.flight_ids[s] for s in self.tiles.scene_idx]

    def subset(self, idx) -> "TileSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TileSet(
            self.tiles.subset(idx),
            self.met[idx],
            self.labels[idx],
            self.flight_ids,
            self.dayparts[idx],
            self.microhabitat[idx],
        )

    def arrays(self):
        from .nn.train import Arrays

        return Arrays(self.tiles, self.met, self.labels)

    @classmethod
    def concat(cls, sets: Sequence["TileSet"]) -> "TileSet":
        """Merge sets, renumbering scenes; record order is preserved."""
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        k = sets[0].k
        scenes, flight_ids, sidx = [], [], []
        for ts in sets:
            if ts.k != k:
                raise ValueError("cannot concatenate tile sets with different tile sizes")
            offset = len(scenes)
            scenes += ts.tiles.scenes
            flight_ids += ts.flight_ids
            sidx.append(ts.tiles.scene_idx + offset)
        view = TileView(
            scenes,
            np.concatenate(sidx),
            np.concatenate([t.tiles.rows for t in sets]),
            np.concatenate([t.tiles.cols for t in sets]),
            k,
        )
        return cls(
            view,
            np.concatenate([t.met for t in sets]),
            np.concatenate([t.labels for t in sets]),
            flight_ids,
            np.concatenate([t.dayparts for t in sets]),
            np.concatenate([t.microhabitat for t in sets]),
        )


def window_positions(size: int, k: int, stride: int, margin: int | None = None) -> np.ndarray:
    """Centre coordinates of fully interior k-windows along one axis.

    ``margin`` (at least ``k // 2``) moves the first and last admissible
    centre inwards, so that several tile sizes can share one centre lattice.
    """
    m = k // 2 if margin is None else int(margin)
    if m < k // 2:
        raise ValueError(f"margin {m} is smaller than the tile half-width {k // 2}")
    return np.arange(m, size - m, stride)


def _finite_windows(stack_arr: np.ndarray, k: int) -> np.ndarray:
    """Boolean (H-k+1, W-k+1): window has no NaN in any channel."""
    bad = (~np.isfinite(stack_arr)).any(axis=0).astype(np.int64)
    csum = np.pad(bad.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    counts = csum[k:, k:] - csum[:-k, k:] - csum[k:, :-k] + csum[:-k, :-k]
    return counts == 0


def extract_tiles(
    scene: SceneBundle,
    std: Standardizer,
    k: int,
    stride: int = DEFAULT_STRIDE,
    margin: int | None = None,
    standardized: np.ndarray | None = None,
) -> TileSet:
    """All fully interior k-windows on a ``stride`` lattice whose centre is bare ground.

    ``standardized`` may pass a precomputed float32 (5, H, W) array to avoid
    recomputing it for every tile size.
    """
    k, stride = int(k), int(stride)
    if k % 2 == 0 or k < 1:
        raise ValueError(f"tile size must be odd and positive, got {k}")
    h, w = scene.shape
    if k > min(h, w):
        raise ValueError(f"tile size {k} exceeds the {w}x{h} map")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    raw = scene.stack.array()
    z = standardized if standardized is not None else std.transform_stack(raw).astype(np.float32)
    rows = window_positions(h, k, stride, margin)
    cols = window_positions(w, k, stride, margin)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    thermal = scene.thermal.values
    tgi = raw[CHANNELS.index("tgi")]
    with np.errstate(invalid="ignore"):
        keep = ~(tgi[rr, cc] > np.float32(std.vegetation_threshold))
    keep &= np.isfinite(thermal[rr, cc])
    keep &= _finite_windows(raw, k)[rr - k // 2, cc - k // 2]
    rr, cc = rr[keep], cc[keep]
    if rr.size == 0:
        logger.warning("scene %s yields no tiles at k=%d (all centres excluded)", scene.flight_id, k)
    n = rr.size
    met = np.tile(std.transform_met(scene.met), (n, 1))
    labels = std.transform_label(thermal[rr, cc].astype(np.float64))
    shade = raw[CHANNELS.index("shade")][rr, cc] > 0.5
    return TileSet(
        tiles=TileView([z], np.zeros(n, dtype=np.int64), rr, cc, k),
        met=met.reshape(n, N_MET),
        labels=labels,
        flight_ids=[scene.flight_id],
        dayparts=np.full(n, DAYPARTS.index(scene.daypart), dtype=np.int64),
        microhabitat=shade.astype(np.int64),
    )


def build_tileset(
    scenes: Sequence[SceneBundle],
    std: Standardizer,
    k: int,
    stride: int = DEFAULT_STRIDE,
    margin: int | None = None,
    standardized: Sequence[np.ndarray] | None = None,
) -> TileSet:
    """Concatenate tiles from several scenes in canonical (scene, row-major) order."""
    z = standardized if standardized is not None else [None] * len(scenes)
    return TileSet.concat([extract_tiles(s, std, k, stride, margin, zi) for s, zi in zip(scenes, z)])


def standardize_scenes(scenes: Sequence[SceneBundle], std: Standardizer) -> list[np.ndarray]:
    return [std.transform_stack(s.stack).astype(np.float32) for s in scenes]


def split_train_val(records: TileSet, fraction: float = 0.8, seed: int = 0) -> tuple[TileSet, TileSet]:
    """Seeded uniform shuffle, then the first ``fraction`` goes to training."""
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty tile set")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    if n_train == n:
        warnings.warn("validation split is empty", RuntimeWarning, stacklevel=2)
    return records.subset(perm[:n_train]), records.subset(perm[n_train:])


def assign_flights(scenes: Sequence[SceneBundle], test_flight_ids) -> tuple[list[SceneBundle], list[SceneBundle]]:
    """Scene-level hold-out: scenes named in ``test_flight_ids`` form the test set."""
    test_ids = list(test_flight_ids)
    if not test_ids:
        raise ValueError("the test set must name at least one flight")
    if len(set(test_ids)) != len(test_ids):
        raise ValueError("duplicate test flight ids")
    known = [s.flight_id for s in scenes]
    if len(set(known)) != len(known):
        raise ValueError("scene flight ids are not unique")
    unknown = sorted(set(test_ids) - set(known))
    if unknown:
        raise ValueError(f"unknown test flight ids: {unknown}")
    test = [s for s in scenes if s.flight_id in set(test_ids)]
    train = [s for s in scenes if s.flight_id not in set(test_ids)]
    if not train:
        raise ValueError("no training flights left after the hold-out")
    return train, test


def assign_days(scenes: Sequence[SceneBundle], test_day_ids) -> tuple[list[SceneBundle], list[SceneBundle]]:
    """Hold out every flight from the given days."""
    days = set(test_day_ids)
    overlap_check = {s.day_id for s in scenes}
    missing = sorted(days - overlap_check)
    if missing:
        raise ValueError(f"unknown test day ids: {missing}")
    return assign_flights(scenes, [s.flight_id for s in scenes if s.day_id in days])


def shard_bytes(ts: TileSet) -> bytes:
    n = len(ts)
    k = ts.k
    rec = np.empty((n, record_length(k)), dtype="<f4")
    ni = len(CHANNELS) * k * k
    for start in range(0, n, 1024):
        sl = slice(start, min(start + 1024, n))
        rec[sl, :ni] = ts.tiles[np.arange(sl.start, sl.stop)].reshape(sl.stop - sl.start, -1)
    rec[:, ni : ni + N_MET] = ts.met
    t = ni + N_MET
    rec[:, t] = ts.labels
    rec[:, t + 1] = ts.tiles.rows
    rec[:, t + 2] = ts.tiles.cols
    rec[:, t + 3] = ts.tiles.scene_idx
    rec[:, t + 4] = ts.dayparts
    rec[:, t + 5] = ts.microhabitat
    return rec.tobytes()


def read_shard(path, k: int) -> dict[str, np.ndarray]:
    """Decode a shard into named float32/int arrays."""
    data = np.fromfile(path, dtype="<f4")
    rl = record_length(k)
    if data.size % rl:
        raise ValueError(f"shard {path} size is not a multiple of the record length {rl}")
    rec = data.reshape(-1, rl)
    ni = len(CHANNELS) * k * k
    t = ni + N_MET
    return {
        "tiles": rec[:, :ni].reshape(-1, len(CHANNELS), k, k),
        "met": rec[:, ni:t],
        "labels": rec[:, t].astype(np.float64),
        "rows": rec[:, t + 1].astype(np.int64),
        "cols": rec[:, t + 2].astype(np.int64),
        "scene": rec[:, t + 3].astype(np.int64),
        "daypart": rec[:, t + 4].astype(np.int64),
        "microhabitat": rec[:, t + 5].astype(np.int64),
    }


def _counts(ts: TileSet) -> dict:
    out = {"total": len(ts)}
    for mi, m in enumerate(MICROHABITATS):
        for di, d in enumerate(DAYPARTS):
            c = int(np.sum((ts.microhabitat == mi) & (ts.dayparts == di)))
            if c:
                out[f"{m}/{d}"] = c
    return out


def write_dataset(directory, splits: dict[str, TileSet], std: Standardizer, stride: int) -> dict:
    """Write one shard per split plus ``manifest.json``; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ks = {ts.k for ts in splits.values()}
    if len(ks) != 1:
        raise ValueError("all splits in one dataset must share a tile size")
    k = ks.pop()
    digest = hashlib.sha256()
    shards = {}
    for name in sorted(splits):
        ts = splits[name]
        blob = shard_bytes(ts)
        fname = f"{name}_k{k}.f32"
        (d / fname).write_bytes(blob)
        digest.update(name.encode())
        digest.update(blob)
        shards[name] = {"file": fname, "flights": ts.flight_ids, "counts": _counts(ts)}
    manifest = {
        "tile_size": k,
        "stride": stride,
        "channels": list(CHANNELS),
        "stack_version": STACK_VERSION,
        "record_length": record_length(k),
        "record_layout": ["inputs(5*k*k)", f"met({N_MET})", *TRAILER],
        "dayparts": list(DAYPARTS),
        "microhabitats": list(MICROHABITATS),
        "standardizer_fingerprint": std.fingerprint(),
        "splits": shards,
        "content_hash": digest.hexdigest(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
