"""Adam with bias correction, and the MSE loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        state = cls(**kw)
        state.m = {k: np.zeros_like(w) for k, w in params.weights.items()}
        state.v = {k: np.zeros_like(w) for k, w in params.weights.items()}
        return state


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update of ``params.weights``."""
    if set(grads) != set(params.weights):
        raise ValueError("gradient keys do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, w in params.weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {k}")
        m = state.m.setdefault(k, np.zeros_like(w))
        v = state.v.setdefault(k, np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        w -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)
    return state


def mse_loss(pred: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred)
    label = np.asarray(label).reshape(pred.shape)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("mse_loss on an empty batch")
    diff = pred - label
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / n) * diff
