"""Adam, global-norm clipping, weight EMA and early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly new) list and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return grads, norm


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, named_params, decay: float = 0.999) -> "EmaState":
        return cls(decay, {name: p.data.copy() for name, p in named_params})


def ema_update(ema: EmaState, named_params) -> EmaState:
    d = ema.decay
    for name, p in named_params:
        s = ema.shadow[name]
        if s.shape != p.data.shape:
            raise ValueError(f"EMA shadow for {name} has shape {s.shape}, parameter {p.data.shape}")
        ema.shadow[name] = d * s + (1.0 - d) * p.data
    return ema


@dataclass
class StopDecision:
    stop: bool
    best_index: int
    best_value: float


def early_stop(history: list[float], patience: int = 5) -> StopDecision:
    """Stop once the best value is ``patience`` evaluations old."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        return StopDecision(False, -1, float("-inf"))
    best = int(np.argmax(history))  # first occurrence: ties do not count as improvement
    return StopDecision(len(history) - 1 - best >= patience, best, float(history[best]))
