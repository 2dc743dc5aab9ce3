"""Adam and SGD with coupled L2 weight decay, plus global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimizerState:
    kind: str  # "adam" | "sgd"
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def adam(lr: float, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("adam", lr, weight_decay)


def sgd(lr: float, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("sgd", lr, weight_decay)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   state: OptimizerState) -> None:
    """Descend on ``grads`` in place. Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    lr, wd = state.learning_rate, state.weight_decay
    for name, g in grads.items():
        p = params[name]
        if wd:
            g = g + wd * p.value
        if state.kind == "sgd":
            p.value -= (lr * g).astype(p.value.dtype, copy=False)
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** state.step)
        v_hat = v / (1 - state.beta2 ** state.step)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype, copy=False)
