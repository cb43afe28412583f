"""Scikit-learn style wrapper around the tile CNN."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, ModelParams
from .train import Arrays, History, predict, train_model


def pack_inputs(tiles: np.ndarray, met: np.ndarray) -> np.ndarray:
    """Flatten (n, c, k, k) tiles and (n, m) met values into one (n, c*k*k + m) matrix."""
    tiles = np.asarray(tiles)
    met = np.asarray(met)
    if tiles.ndim != 4 or met.ndim != 2 or tiles.shape[0] != met.shape[0]:
        raise ValueError(f"incompatible shapes {tiles.shape} and {met.shape}")
    return np.hstack([tiles.reshape(tiles.shape[0], -1), met])


def unpack_inputs(X: np.ndarray, channels: int, met_inputs: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`pack_inputs`; infers k from the row length."""
    n_tile = X.shape[1] - met_inputs
    k = int(round(np.sqrt(n_tile / channels)))
    if n_tile <= 0 or channels * k * k != n_tile:
        raise ValueError(f"row length {X.shape[1]} is not {channels}*k*k + {met_inputs}")
    return X[:, :n_tile].reshape(-1, channels, k, k), X[:, n_tile:]


class TileCNNRegressor(BaseEstimator, RegressorMixin):
    """Residual CNN predicting the centre-pixel value of each tile.

    ``fit``/``predict`` take packed rows (see :func:`pack_inputs`);
    ``fit_tiles``/``predict_tiles`` take tile and met arrays directly,
    which also accepts lazy tile views.

    Parameters
    ----------
    stem_width, stage_widths, blocks_per_stage, head_hidden, use_batchnorm, precision
        Architecture, forwarded to :class:`ModelConfig`.
    epochs, batch_size, lr, seed
        Training schedule; the best epoch on the validation split is kept.
    val_fraction
        Share of rows used for training when ``fit`` has to make its own
        validation split.
    checkpoint_dir
        If set, ``best.ckpt`` is written there during training.
    keep_every_epoch
        Also write ``epoch_NNN.ckpt`` for every epoch.
    """

    def __init__(
        self,
        stem_width: int = 16,
        stage_widths: tuple[int, ...] = (16, 32, 64),
        blocks_per_stage: int = 1,
        head_hidden: int = 128,
        use_batchnorm: bool = False,
        precision: str = "f32",
        epochs: int = 100,
        batch_size: int = 64,
        lr: float = 1e-4,
        seed: int = 0,
        val_fraction: float = 0.8,
        checkpoint_dir=None,
        keep_every_epoch: bool = False,
    ):
        self.stem_width = stem_width
        self.stage_widths = stage_widths
        self.blocks_per_stage = blocks_per_stage
        self.head_hidden = head_hidden
        self.use_batchnorm = use_batchnorm
        self.precision = precision
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.val_fraction = val_fraction
        self.checkpoint_dir = checkpoint_dir
        self.keep_every_epoch = keep_every_epoch

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            stem_width=self.stem_width,
            stage_widths=tuple(self.stage_widths),
            blocks_per_stage=self.blocks_per_stage,
            head_hidden=self.head_hidden,
            use_batchnorm=self.use_batchnorm,
            precision=self.precision,
        )

    @classmethod
    def from_config(cls, cfg: ModelConfig, **kwargs) -> "TileCNNRegressor":
        return cls(
            stem_width=cfg.stem_width,
            stage_widths=cfg.stage_widths,
            blocks_per_stage=cfg.blocks_per_stage,
            head_hidden=cfg.head_hidden,
            use_batchnorm=cfg.use_batchnorm,
            precision=cfg.precision,
            **kwargs,
        )

    def fit_tiles(self, train: Arrays, val: Arrays) -> "TileCNNRegressor":
        cfg = self.model_config()
        params, history = train_model(
            cfg,
            train,
            val,
            epochs=self.epochs,
            seed=self.seed,
            lr=self.lr,
            batch_size=self.batch_size,
            checkpoint_dir=self.checkpoint_dir,
            keep_every_epoch=self.keep_every_epoch,
        )
        self._set_fitted(params, cfg, history)
        return self

    def _set_fitted(self, params: ModelParams, cfg: ModelConfig, history: History | None) -> None:
        self.params_ = params
        self.config_ = cfg
        self.history_ = history if history is not None else History()
        self.tile_size_ = params.tile_size

    def fit(self, X, y) -> "TileCNNRegressor":
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        cfg = self.model_config()
        tiles, met = unpack_inputs(X, cfg.input_channels, cfg.met_inputs)
        perm = np.random.default_rng(self.seed).permutation(X.shape[0])
        n_train = int(round(self.val_fraction * X.shape[0]))
        if n_train in (0, X.shape[0]):
            raise ValueError("fit needs at least one training and one validation row")
        tr, va = perm[:n_train], perm[n_train:]
        return self.fit_tiles(Arrays(tiles[tr], met[tr], y[tr]), Arrays(tiles[va], met[va], y[va]))

    def predict_tiles(self, tiles, met, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "params_")
        if tiles.shape[2] != self.tile_size_:
            raise ValueError(f"model was trained on {self.tile_size_}-px tiles, got {tiles.shape[2]}")
        return predict(self.params_, self.config_, tiles, met, batch_size)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        tiles, met = unpack_inputs(X, self.config_.input_channels, self.config_.met_inputs)
        return self.predict_tiles(tiles, met)

    def save(self, path, meta: dict | None = None) -> int:
        check_is_fitted(self, "params_")
        return save_checkpoint(path, self.params_, self.config_, meta)

    @classmethod
    def load(cls, path) -> "TileCNNRegressor":
        params, cfg, meta = load_checkpoint(path)
        est = cls.from_config(cfg, seed=params.seed)
        est._set_fitted(params, cfg, None)
        return est
