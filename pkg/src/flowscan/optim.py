"""Named parameter storage and the Adam update."""

from __future__ import annotations

import math

import numpy as np

from .core import Tensor
from .errors import ConfigError, ContractError


class ParamStore:
    """Ordered map ``name -> Tensor`` plus per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_values(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(p.grad * p.grad))
                             for p in self.params.values() if p.grad is not None))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, values):
        for k, arr in values.items():
            self.params[k].data = np.array(arr, dtype=np.float64)


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0):
    """One bias-corrected Adam update; gradients are clipped to ``clip_norm``
    in global L2 norm, then cleared. Returns the pre-clip gradient norm."""
    if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
        raise ConfigError("adam_step: need lr > 0, 0 <= beta < 1, eps > 0")
    missing = [k for k, p in store.items() if p.grad is None]
    if missing:
        raise ContractError(f"missing gradient for parameter(s): {', '.join(missing)}")

    norm = store.grad_norm()
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in store.items():
        g = p.grad * scale
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
    return norm
