"""Named parameter store, Adam with bias correction, cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import MissingGradientError, ShapeMismatchError
from .tensor import Tensor


class ParamStore:
    """Named learnable tensors plus per-tensor Adam moment state.

    Iteration and updates always run in sorted-name order so training is
    reproducible run to run.
    """

    def __init__(self):
        self.params = {}
        self.moments = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.moments[name] = (np.zeros(t.data.shape), np.zeros(t.data.shape))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self):
        """Parameter arrays by name (copies)."""
        return {name: self.params[name].data.copy() for name in self.names()}

    def load_state_dict(self, state: dict):
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ShapeMismatchError(f"parameter name mismatch: missing={missing}, extra={extra}")
        for name, arr in state.items():
            t = self.params[name]
            if arr.shape != t.data.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: stored shape {arr.shape} vs model shape {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)


def cosine_lr(base_lr: float, step: int, horizon: int) -> float:
    """lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)), clamped at t = T."""
    if horizon <= 0:
        raise ValueError(f"schedule horizon must be positive, got {horizon}")
    t = min(max(step, 0), horizon)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update over every parameter, in sorted-name order."""
    for name in store.names():
        if store.params[name].grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient; run backward first")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in store.names():
        p = store.params[name]
        g = p.grad
        m, v = store.moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
