"""Analytic vs central finite-difference gradients for every layer type.

Each check reduces the layer output to a scalar with a fixed random
projection and compares gradients elementwise. The relative error of an
element is ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` set to 1e-3 of
the largest analytic magnitude in the tensor, so that entries which are zero
up to rounding do not dominate.

The finite-difference reference is always evaluated in float64 on the same
values; in f32 mode only the analytic side runs in float32, so the check
measures the f32 backward pass rather than f32 differencing noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import layers as L
from .model import ModelConfig, backward, forward, init_params

DEFAULT_TOLERANCE = {"f64": 1e-4, "f32": 1e-2}
STEP = 1e-6
# per-tensor cap on finite-difference entries in whole-model checks
MAX_ENTRIES = 256


@dataclass
class CheckResult:
    layer: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


@dataclass
class GradCheckReport:
    precision: str
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        return [
            f"{r.layer:<28s} max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
            f"{'PASS' if r.passed else 'FAIL'}"
            for r in self.results
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    floor = max(1e-3 * scale, np.finfo(np.float64).tiny)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (perturbed in place).

    With ``index`` (flat positions), only those entries are differenced and
    the result has one value per position.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    grad = np.zeros(x.shape if index is None else len(index), dtype=np.float64)
    g = grad.reshape(-1)
    for j, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[j] = (fp - fm) / (2 * h)
    return grad


def _projected(out: np.ndarray, proj: np.ndarray) -> float:
    return float(np.sum(out.astype(np.float64) * proj))


def check_conv(rng, dt, h, tol) -> list[CheckResult]:
    x = rng.standard_normal((1, 9, 9, 5))
    w = rng.standard_normal((3, 3, 5, 4)) * 0.3
    b = rng.standard_normal(4)
    results = []
    for stride in (1, 2):
        out, cache = L.conv2d_forward(x.astype(dt), w.astype(dt), b.astype(dt), stride, 1)
        proj = rng.standard_normal(out.shape)
        dx, dw, db = L.conv2d_backward(proj.astype(dt), cache)
        f = lambda: _projected(L.conv2d_forward(x, w, b, stride, 1)[0], proj)
        err = max(
            relative_error(dx, numeric_gradient(f, x, h)),
            relative_error(dw, numeric_gradient(f, w, h)),
            relative_error(db, numeric_gradient(f, b, h)),
        )
        results.append(CheckResult(f"conv3x3 stride {stride}", err, tol))
    return results


def check_relu(rng, dt, h, tol) -> CheckResult:
    x = rng.standard_normal((2, 4, 4, 3))
    # keep inputs well away from the kink
    x = np.sign(x) * (np.abs(x) + 0.1)
    out, mask = L.relu_forward(x.astype(dt))
    proj = rng.standard_normal(out.shape)
    dx = L.relu_backward(proj.astype(dt), mask)
    f = lambda: _projected(L.relu_forward(x)[0], proj)
    return CheckResult("rectifier", relative_error(dx, numeric_gradient(f, x, h)), tol)


def check_pool(rng, dt, h, tol) -> CheckResult:
    x = rng.standard_normal((2, 7, 7, 3))
    out, shape = L.avgpool_forward(x.astype(dt))
    proj = rng.standard_normal(out.shape)
    dx = L.avgpool_backward(proj.astype(dt), shape)
    f = lambda: _projected(L.avgpool_forward(x)[0], proj)
    return CheckResult("avgpool2x2", relative_error(dx, numeric_gradient(f, x, h)), tol)


def check_linear(rng, dt, h, tol) -> CheckResult:
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((6, 4))
    b = rng.standard_normal(4)
    out, cache = L.linear_forward(x.astype(dt), w.astype(dt), b.astype(dt))
    proj = rng.standard_normal(out.shape)
    dx, dw, db = L.linear_backward(proj.astype(dt), cache)
    f = lambda: _projected(L.linear_forward(x, w, b)[0], proj)
    err = max(
        relative_error(dx, numeric_gradient(f, x, h)),
        relative_error(dw, numeric_gradient(f, w, h)),
        relative_error(db, numeric_gradient(f, b, h)),
    )
    return CheckResult("linear", err, tol)


def check_batchnorm(rng, dt, h, tol) -> CheckResult:
    x = rng.standard_normal((3, 4, 4, 2))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)

    def run(t=np.float64):
        rm, rv = np.zeros(2, t), np.ones(2, t)
        return L.batchnorm_forward(x.astype(t), gamma.astype(t), beta.astype(t), rm, rv, True)

    out, cache = run(dt)
    proj = rng.standard_normal(out.shape)
    dx, dg, db = L.batchnorm_backward(proj.astype(dt), cache)
    f = lambda: _projected(run()[0], proj)
    err = max(
        relative_error(dx, numeric_gradient(f, x, h)),
        relative_error(dg, numeric_gradient(f, gamma, h)),
        relative_error(db, numeric_gradient(f, beta, h)),
    )
    return CheckResult("batchnorm", err, tol)


def check_model(
    rng, cfg: ModelConfig, tile: int, h, tol, label: str, seed: int, max_entries: int = MAX_ENTRIES
) -> list[CheckResult]:
    """Whole-network check, grouped into residual blocks, head, and inputs.

    Tensors with more than ``max_entries`` values are checked on a seeded
    random subset of positions.
    """
    cfg64 = replace(cfg, precision="f64")
    params = init_params(cfg64, tile, seed)
    dt = cfg.dtype
    for k, w in params.weights.items():
        # non-zero biases so no unit sits exactly at a kink
        if k.endswith(".b") or k.endswith(".beta"):
            w[...] = rng.uniform(-0.1, 0.1, w.shape)
    tiles = rng.standard_normal((2, cfg.input_channels, tile, tile))
    met = rng.standard_normal((2, cfg.met_inputs))
    proj = rng.standard_normal((2, 1))
    # batch-norm uses batch statistics in training mode, so running stats
    # updated by repeated passes do not affect the output
    training = cfg.use_batchnorm

    def f():
        return _projected(forward(params, cfg64, tiles, met, training=training), proj)

    low = params.astype(dt)
    _, cache = forward(low, cfg, tiles.astype(dt), met.astype(dt), training=training, return_cache=True)
    grads, dtiles, dmet = backward(low, cfg, cache, proj.astype(dt))
    groups: dict[str, float] = {}
    for name, w in params.weights.items():
        idx = None
        if w.size > max_entries:
            idx = np.sort(rng.choice(w.size, max_entries, replace=False))
        analytic = grads[name] if idx is None else grads[name].reshape(-1)[idx]
        err = relative_error(analytic, numeric_gradient(f, w, h, idx))
        if name.startswith("stage"):
            key = "residual block (" + ("projection" if ".proj" in name or name.split(".")[1] == "block1" else "identity") + ")"
        elif name.startswith("head"):
            key = "head"
        else:
            key = "stem"
        groups[key] = max(groups.get(key, 0.0), err)
    groups["met-concat: tile branch"] = relative_error(dtiles, numeric_gradient(f, tiles, h))
    groups["met-concat: met branch"] = relative_error(dmet, numeric_gradient(f, met, h))
    return [CheckResult(f"{label} {k}", v, tol) for k, v in groups.items()]


def grad_check(
    cfg: ModelConfig | None = None,
    seed: int = 0,
    tolerance: float | None = None,
    precision: str = "f64",
) -> GradCheckReport:
    """Run every layer check and return a report; never raises on mismatch."""
    if precision not in DEFAULT_TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(DEFAULT_TOLERANCE)}")
    tol = DEFAULT_TOLERANCE[precision] if tolerance is None else tolerance
    h = STEP
    dt = np.float64 if precision == "f64" else np.float32
    rng = np.random.default_rng(seed)
    report = GradCheckReport(precision)
    report.results += check_conv(rng, dt, h, tol)
    report.results.append(check_relu(rng, dt, h, tol))
    report.results.append(check_pool(rng, dt, h, tol))
    report.results.append(check_linear(rng, dt, h, tol))
    report.results.append(check_batchnorm(rng, dt, h, tol))
    base = cfg or ModelConfig(stem_width=4, stage_widths=(4, 6), blocks_per_stage=2)
    base = replace(base, precision=precision)
    report.results += check_model(rng, replace(base, use_batchnorm=False), 9, h, tol, "model", seed)
    report.results += check_model(rng, replace(base, use_batchnorm=True), 9, h, tol, "model+bn", seed)
    return report
