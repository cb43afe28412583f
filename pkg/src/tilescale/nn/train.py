"""Mini-batch training with per-epoch validation and best-checkpoint selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .model import ModelConfig, ModelParams, backward, forward, init_params
from .optim import AdamState, adam_step, mse_loss

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class Arrays(NamedTuple):
    """Tiles (n, 5, k, k), met (n, 8) and labels (n,)."""

    tiles: np.ndarray
    met: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for e, t, v in zip(self.epochs, self.train_mse, self.val_mse):
                w.writerow([e, repr(t), repr(v)])


def predict(params: ModelParams, cfg: ModelConfig, tiles, met, batch_size: int = 256) -> np.ndarray:
    """Inference in fixed-size chunks; returns a flat float64 array."""
    n = len(tiles)
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward(params, cfg, tiles[sl], met[sl])[:, 0]
    return out


def evaluate_mse(params, cfg, data: Arrays, batch_size: int = 256) -> float:
    pred = predict(params, cfg, data.tiles, data.met, batch_size)
    return float(np.mean((pred - data.labels) ** 2))


def train_model(
    cfg: ModelConfig,
    train: Arrays,
    val: Arrays,
    epochs: int = 100,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 64,
    checkpoint_dir=None,
    keep_every_epoch: bool = False,
    init: ModelParams | None = None,
) -> tuple[ModelParams, History]:
    """Train with Adam on MSE and return the parameters of the epoch with lowest validation MSE.

    Shuffling is seeded and the order of floating-point reductions is fixed,
    so identical inputs give bit-identical results on one BLAS thread.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_model needs non-empty training and validation sets")
    k = train.tiles.shape[2]
    params = init if init is not None else init_params(cfg, k, seed)
    history = History()
    if epochs <= 0:
        return params, history

    dt = cfg.dtype
    tiles = train.tiles.astype(dt, copy=False)
    met = train.met.astype(dt, copy=False)
    labels = train.labels.astype(dt, copy=False)
    val = Arrays(val.tiles.astype(dt, copy=False), val.met.astype(dt, copy=False), val.labels)
    state = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    best = params.copy()
    best_val = np.inf
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    n = len(train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred, cache = forward(params, cfg, tiles[idx], met[idx], training=True, return_cache=True)
            loss, dpred = mse_loss(pred, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            grads, _, _ = backward(params, cfg, cache, dpred)
            adam_step(params, grads, state)
            total += loss * len(idx)
        train_mse = total / n
        try:
            val_mse = evaluate_mse(params, cfg, val)
        except FloatingPointError as exc:
            raise TrainingDivergedError(epoch, float("nan")) from exc
        if not np.isfinite(val_mse):
            raise TrainingDivergedError(epoch, val_mse)
        history.epochs.append(epoch)
        history.train_mse.append(train_mse)
        history.val_mse.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best = params.copy()
            history.best_epoch = epoch
        logger.debug("epoch %d train_mse %.5f val_mse %.5f", epoch, train_mse, val_mse)
        if ckpt_dir is not None:
            from .checkpoint import save_checkpoint

            meta = {"epoch": epoch, "val_mse": val_mse, "seed": seed}
            if keep_every_epoch:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.ckpt", params, cfg, meta)
            if history.best_epoch == epoch:
                save_checkpoint(ckpt_dir / "best.ckpt", best, cfg, meta)
    return best, history
