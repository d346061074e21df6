"""Adam optimizer over named parameters."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from services.errors import DimensionError, TrainingError
from services.nn import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.asarray(self.step, dtype=np.int64)}
        out.update({f"{prefix}m.{name}": value for name, value in self.m.items()})
        out.update({f"{prefix}v.{name}": value for name, value in self.v.items()})
        return out

    @classmethod
    def from_state_dict(cls, arrays: Mapping[str, np.ndarray], prefix: str) -> AdamState:
        state = cls(step=int(arrays[f"{prefix}step"]))
        for key, value in arrays.items():
            if key.startswith(f"{prefix}m."):
                state.m[key[len(prefix) + 2:]] = np.array(value)
            elif key.startswith(f"{prefix}v."):
                state.v[key[len(prefix) + 2:]] = np.array(value)
        return state


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update.

    Parameters receive fresh arrays rather than in-place writes so that
    any graph still holding the old values stays consistent.
    """
    if state.step < 0:
        raise TrainingError(f"Adam step counter must be >= 0, got {state.step}")
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        elif m.shape != param.shape:
            raise DimensionError(f"optimizer state for '{name}' has shape {m.shape}, parameter has {param.shape}")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
    return state


def clip_grad_norm(grads: Mapping[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


class Adam:
    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.state = AdamState()

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self) -> float | None:
        grads = {name: p.grad for name, p in self.params.items()}
        norm = None
        if self.grad_clip is not None:
            for name, grad in grads.items():
                if grad is not None and not np.all(np.isfinite(grad)):
                    raise TrainingError(f"non-finite gradient for parameter '{name}'")
            norm = clip_grad_norm(grads, self.grad_clip)
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return norm
