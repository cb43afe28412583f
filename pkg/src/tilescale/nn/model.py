"""Reduced residual CNN regressor with meteorological fusion.

Convolutions carry a bias only when batch norm is off.

Layout: 3x3 stem conv -> rectifier -> optional 2x2 average pool -> residual
stages (stride 2 at stage entry while the feature map is at least 4 px) ->
flatten -> concat met vector -> fully connected to ``head_hidden`` ->
rectifier -> fully connected to 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 5
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    head_hidden: int = 128
    met_inputs: int = 8
    stem_pool: bool = True
    use_batchnorm: bool = False
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.input_channels != 5:
            raise ValueError(f"input_channels must be 5, got {self.input_channels}")
        if self.head_hidden != 128:
            raise ValueError(f"head_hidden must be 128, got {self.head_hidden}")
        if self.blocks_per_stage < 1 or not self.stage_widths:
            raise ValueError("need at least one stage with one block")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Weights and batch-norm buffers keyed by layer path, in canonical order."""

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    tile_size: int = 0
    seed: int = 0

    @property
    def count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.tile_size,
            self.seed,
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.tile_size,
            self.seed,
        )


@dataclass(frozen=True)
class BlockSpec:
    name: str
    c_in: int
    c_out: int
    stride: int

    @property
    def projected(self) -> bool:
        return self.stride != 1 or self.c_in != self.c_out


@dataclass(frozen=True)
class Architecture:
    tile_size: int
    pooled: bool
    blocks: tuple[BlockSpec, ...]
    final_hw: int
    final_channels: int

    @property
    def flat_features(self) -> int:
        return self.final_hw * self.final_hw * self.final_channels


def architecture(cfg: ModelConfig, tile_size: int) -> Architecture:
    """Resolve strides and the flatten width for a given tile size."""
    if tile_size < 1:
        raise ValueError("tile_size must be positive")
    hw = tile_size
    pooled = cfg.stem_pool and hw >= 4
    if pooled:
        hw //= 2
    blocks = []
    c = cfg.stem_width
    for si, width in enumerate(cfg.stage_widths, start=1):
        for bi in range(1, cfg.blocks_per_stage + 1):
            stride = 2 if bi == 1 and hw >= 4 else 1
            blocks.append(BlockSpec(f"stage{si}.block{bi}", c, width, stride))
            hw = L.conv_output_size(hw, 3, stride, 1)
            c = width
    return Architecture(tile_size, pooled, tuple(blocks), hw, c)


def _conv_init(rng, kh, kw, cin, cout, dtype):
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype)


def init_params(cfg: ModelConfig, tile_size: int, seed: int = 0) -> ModelParams:
    """Seeded fan-in (Kaiming) initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    arch = architecture(cfg, tile_size)
    w: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout):
        w[f"{name}.w"] = _conv_init(rng, k, k, cin, cout, dt)
        if not cfg.use_batchnorm:
            w[f"{name}.b"] = np.zeros(cout, dt)
        else:
            w[f"{name}.bn.gamma"] = np.ones(cout, dt)
            w[f"{name}.bn.beta"] = np.zeros(cout, dt)
            buf[f"{name}.bn.mean"] = np.zeros(cout, dt)
            buf[f"{name}.bn.var"] = np.ones(cout, dt)

    conv("stem", 3, cfg.input_channels, cfg.stem_width)
    for b in arch.blocks:
        conv(f"{b.name}.conv1", 3, b.c_in, b.c_out)
        conv(f"{b.name}.conv2", 3, b.c_out, b.c_out)
        if b.projected:
            conv(f"{b.name}.proj", 1, b.c_in, b.c_out)
    fan_in = arch.flat_features + cfg.met_inputs
    w["head.fc1.w"] = (rng.standard_normal((fan_in, cfg.head_hidden)) * np.sqrt(2.0 / fan_in)).astype(dt)
    w["head.fc1.b"] = np.zeros(cfg.head_hidden, dt)
    w["head.fc2.w"] = (rng.standard_normal((cfg.head_hidden, 1)) * np.sqrt(1.0 / cfg.head_hidden)).astype(dt)
    w["head.fc2.b"] = np.zeros(1, dt)
    return ModelParams(w, buf, tile_size, seed)


def param_count(cfg: ModelConfig, tile_size: int) -> int:
    return init_params(cfg, tile_size).count


class ForwardCache:
    """Intermediate values kept by :func:`forward` for :func:`backward`."""

    def __init__(self, arch: Architecture, training: bool):
        self.arch = arch
        self.training = training
        self.items: dict[str, object] = {}


def _conv_unit(params, cfg, name, x, stride, pad, training, cache):
    out, c = L.conv2d_forward(x, params.weights[f"{name}.w"], params.weights.get(f"{name}.b"), stride, pad)
    cache[f"{name}.conv"] = c
    if cfg.use_batchnorm:
        out, c = L.batchnorm_forward(
            out,
            params.weights[f"{name}.bn.gamma"],
            params.weights[f"{name}.bn.beta"],
            params.buffers[f"{name}.bn.mean"],
            params.buffers[f"{name}.bn.var"],
            training,
        )
        cache[f"{name}.bn"] = c
    return out


def _conv_unit_back(cfg, name, dout, cache, grads):
    if cfg.use_batchnorm:
        dout, dg, db = L.batchnorm_backward(dout, cache[f"{name}.bn"])
        grads[f"{name}.bn.gamma"] = dg
        grads[f"{name}.bn.beta"] = db
    dx, dw, dbias = L.conv2d_backward(dout, cache[f"{name}.conv"])
    grads[f"{name}.w"] = dw
    if dbias is not None:
        grads[f"{name}.b"] = dbias
    return dx


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    tiles: np.ndarray,
    met: np.ndarray,
    training: bool = False,
    return_cache: bool = False,
):
    """Predict one value per tile.

    ``tiles`` is (batch, channels, k, k); ``met`` is (batch, met_inputs).
    Returns (batch, 1) predictions, plus a :class:`ForwardCache` when asked.
    """
    tiles = np.asarray(tiles)
    met = np.asarray(met)
    if tiles.ndim != 4 or tiles.shape[1] != cfg.input_channels:
        raise ValueError(f"tiles must be (batch, {cfg.input_channels}, k, k), got {tiles.shape}")
    k = tiles.shape[2]
    if tiles.shape[3] != k or (params.tile_size and k != params.tile_size):
        raise ValueError(f"tile shape {tiles.shape[2:]} does not match model tile size {params.tile_size}")
    if met.shape != (tiles.shape[0], cfg.met_inputs):
        raise ValueError(f"met must be ({tiles.shape[0]}, {cfg.met_inputs}), got {met.shape}")
    dt = cfg.dtype
    arch = architecture(cfg, k)
    fc = ForwardCache(arch, training)
    c = fc.items

    x = np.ascontiguousarray(tiles.transpose(0, 2, 3, 1), dtype=dt)
    x = _conv_unit(params, cfg, "stem", x, 1, 1, training, c)
    x, c["stem.relu"] = L.relu_forward(x)
    if arch.pooled:
        x, c["pool"] = L.avgpool_forward(x)
    for b in arch.blocks:
        h = _conv_unit(params, cfg, f"{b.name}.conv1", x, b.stride, 1, training, c)
        h, c[f"{b.name}.relu1"] = L.relu_forward(h)
        h = _conv_unit(params, cfg, f"{b.name}.conv2", h, 1, 1, training, c)
        skip = _conv_unit(params, cfg, f"{b.name}.proj", x, b.stride, 0, training, c) if b.projected else x
        x, c[f"{b.name}.relu2"] = L.relu_forward(h + skip)
    c["flat_shape"] = x.shape
    flat = x.reshape(x.shape[0], -1)
    z = np.concatenate([flat, met.astype(dt)], axis=1)
    h, c["fc1"] = L.linear_forward(z, params.weights["head.fc1.w"], params.weights["head.fc1.b"])
    h, c["fc1.relu"] = L.relu_forward(h)
    out, c["fc2"] = L.linear_forward(h, params.weights["head.fc2.w"], params.weights["head.fc2.b"])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations in forward pass")
    return (out, fc) if return_cache else out


def backward(params: ModelParams, cfg: ModelConfig, cache: ForwardCache | None, loss_grad: np.ndarray):
    """Reverse-mode gradients for every parameter.

    Returns ``(grads, dtiles, dmet)`` where the input gradients are in the
    caller's (batch, channels, k, k) and (batch, met_inputs) layouts.
    """
    if cache is None:
        raise RuntimeError("backward needs the cache from a forward pass with return_cache=True")
    c = cache.items
    arch = cache.arch
    grads: dict[str, np.ndarray] = {}
    dout = np.asarray(loss_grad, dtype=cfg.dtype).reshape(-1, 1)

    dh, grads["head.fc2.w"], grads["head.fc2.b"] = L.linear_backward(dout, c["fc2"])
    dh = L.relu_backward(dh, c["fc1.relu"])
    dz, grads["head.fc1.w"], grads["head.fc1.b"] = L.linear_backward(dh, c["fc1"])
    n_flat = arch.flat_features
    dmet = dz[:, n_flat:]
    dx = dz[:, :n_flat].reshape(c["flat_shape"])
    for b in reversed(arch.blocks):
        dsum = L.relu_backward(dx, c[f"{b.name}.relu2"])
        dh = _conv_unit_back(cfg, f"{b.name}.conv2", dsum, c, grads)
        dh = L.relu_backward(dh, c[f"{b.name}.relu1"])
        dx = _conv_unit_back(cfg, f"{b.name}.conv1", dh, c, grads)
        if b.projected:
            dx = dx + _conv_unit_back(cfg, f"{b.name}.proj", dsum, c, grads)
        else:
            dx = dx + dsum
    if arch.pooled:
        dx = L.avgpool_backward(dx, c["pool"])
    dx = L.relu_backward(dx, c["stem.relu"])
    dx = _conv_unit_back(cfg, "stem", dx, c, grads)
    ordered = {k: grads[k] for k in params.weights}
    return ordered, dx.transpose(0, 3, 1, 2), dmet
