"""Sorted scan of a set and the couplings that act on scan-ordered points."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import core as C
from .core import Tensor, as_tensor
from .errors import ConfigError, ContractError
from .layers import MLP, GatedCell
from .transforms import SCALE_BOUND, Transform, TransformResult


class ScanResult(NamedTuple):
    sorted: Tensor
    order: np.ndarray   # (B, n): sorted[b, k] = x[b, order[b, k]]
    correction: float   # -log(n!)


def factorial_correction(n):
    """``-log(n!)``, the log of the 1/n! factor relating sorted and unordered densities."""
    if n < 1:
        raise ContractError(f"factorial_correction needs n >= 1, got {n}")
    return -math.lgamma(n + 1)


def sort_scan(x, key_dim=0):
    """Stable ascending sort of each set's points by coordinate ``key_dim``.

    The permutation is piecewise constant, so gradients pass through the
    gather unchanged and the map contributes no log-determinant.
    """
    x = as_tensor(x)
    d = x.shape[2]
    if not 0 <= key_dim < d:
        raise ContractError(f"key_dim {key_dim} out of range for d={d}")
    order = np.argsort(x.data[:, :, key_dim], axis=1, kind="stable")
    z = C.gather(x, order[:, :, None], axis=1)
    return ScanResult(z, order, factorial_correction(x.shape[1]))


def _interleave(first, second, tail):
    """Rebuild ``(p0, q0, p1, q1, ..., [tail])`` from the two parity streams."""
    B, m, d = first.shape
    pairs = C.stack([first, second], axis=2)
    z = C.reshape(pairs, (B, 2 * m, d))
    return z if tail is None else C.concat([z, tail], axis=1)


class CorrespondenceCoupling(Transform):
    """Affine coupling across scan-adjacent pairs ``(z_{2j}, z_{2j+1})``.

    ``parity="even"`` rescales/shifts each even-indexed point given its odd
    partner; ``parity="odd"`` does the reverse. With odd ``n`` the last point
    has no partner and passes through.
    """

    name = "correspondence"

    def __init__(self, store, prefix, d, parity, rng, hidden=(64, 64)):
        if parity not in ("even", "odd"):
            raise ConfigError(f"parity must be 'even' or 'odd', got {parity!r}")
        self.parity = parity
        self.d = d
        self.net = MLP(store, f"{prefix}.net", [d, *hidden, 2 * d], rng)

    def _split(self, z):
        n = z.shape[1]
        if n < 2:
            raise ContractError("correspondence coupling needs n >= 2")
        m = n // 2
        even = z[:, 0:2 * m:2]
        odd = z[:, 1:2 * m:2]
        tail = z[:, 2 * m:] if n % 2 else None
        return (even, odd, tail) if self.parity == "even" else (odd, even, tail)

    def _join(self, moved, fixed, tail):
        if self.parity == "even":
            return _interleave(moved, fixed, tail)
        return _interleave(fixed, moved, tail)

    def _scale_shift(self, cond):
        out = self.net(cond)
        return C.soft_clamp(out[..., :self.d], SCALE_BOUND), out[..., self.d:]

    def forward(self, z):
        moved, fixed, tail = self._split(z)
        logs, shift = self._scale_shift(fixed)
        out = self._join(C.exp(logs) * moved + shift, fixed, tail)
        return TransformResult(out, logs.sum(axis=(1, 2)))

    def inverse(self, y):
        moved, fixed, tail = self._split(y)
        logs, shift = self._scale_shift(fixed)
        out = self._join((moved - shift) * C.exp(-logs), fixed, tail)
        return TransformResult(out, -logs.sum(axis=(1, 2)))


class RecurrentCoupling(Transform):
    """Point ``i`` is scaled and shifted by functions of a recurrent summary
    of the untransformed points ``< i``; the first point is unchanged."""

    name = "recurrent"

    def __init__(self, store, prefix, d, rng, hidden=32, head_hidden=64):
        self.d = d
        self.cell = GatedCell(store, f"{prefix}.cell", d, hidden, rng)
        self.head = MLP(store, f"{prefix}.head", [hidden, head_hidden, 2 * d], rng)

    def _scale_shift(self, h):
        out = self.head(h)
        return C.soft_clamp(out[..., :self.d], SCALE_BOUND), out[..., self.d:]

    def forward(self, z):
        n = z.shape[1]
        if n == 1:
            return TransformResult(z, Tensor(np.zeros(z.shape[0])))
        states = self.cell.run(z[:, :n - 1])[1:]
        h = C.stack(states, axis=1)
        logs, shift = self._scale_shift(h)
        rest = C.exp(logs) * z[:, 1:] + shift
        return TransformResult(C.concat([z[:, :1], rest], axis=1), logs.sum(axis=(1, 2)))

    def inverse(self, y):
        B, n = y.shape[:2]
        h = self.cell.initial(B)
        xs = [y[:, 0]]
        logdet = Tensor(np.zeros(B))
        for i in range(1, n):
            h = self.cell.step(h, self.cell.project(xs[-1]))
            logs, shift = self._scale_shift(h)
            xs.append((y[:, i] - shift) * C.exp(-logs))
            logdet = logdet - logs.sum(axis=1)
        return TransformResult(C.stack(xs, axis=1), logdet)


class OrderMap(Transform):
    """Bijection from scan order (key column nondecreasing) to unconstrained
    coordinates: the key column becomes its first value followed by the
    inverse-softplus of each consecutive gap; other columns pass through.

    Downstream densities on R^{n x d} then put all their mass on sorted
    sequences, which keeps the scan likelihood normalized. Near zero the gap
    map behaves like a log; for large gaps it is close to the identity, so
    Gaussian tails in the base stay Gaussian-tailed in the data.
    """

    name = "order-map"

    def __init__(self, d, key_dim=0):
        if not 0 <= key_dim < d:
            raise ConfigError(f"key_dim {key_dim} out of range for d={d}")
        self.d = d
        self.key = key_dim

    def _swap_key(self, z, column):
        cols = [column if j == self.key else z[:, :, j] for j in range(self.d)]
        return C.stack(cols, axis=2)

    def forward(self, z):
        B, n = z.shape[:2]
        if n == 1:
            return TransformResult(z, Tensor(np.zeros(B)))
        key = z[:, :, self.key]
        gaps = key[:, 1:] - key[:, :-1]
        if np.any(gaps.data <= 0):
            raise ContractError("order map needs strictly increasing sort keys (tied points?)")
        # u = log(expm1(g)) = g + log(1 - exp(-g)); du/dg = exp(g - u)
        shift = C.log(1.0 - C.exp(-gaps))
        out = self._swap_key(z, C.concat([key[:, :1], gaps + shift], axis=1))
        return TransformResult(out, -shift.sum(axis=1))

    def inverse(self, u):
        B, n = u.shape[:2]
        if n == 1:
            return TransformResult(u, Tensor(np.zeros(B)))
        col = u[:, :, self.key]
        v = col[:, 1:]
        pos = C.leaky_relu(v, 0.0)
        gaps = pos + C.log(1.0 + C.exp(v - 2.0 * pos))   # softplus(v), overflow safe
        steps = C.concat([col[:, :1], gaps], axis=1)
        key = C.matmul(steps, np.triu(np.ones((n, n))))   # running sum
        # dg/dv = sigmoid(v), and log sigmoid(v) = v - softplus(v)
        return TransformResult(self._swap_key(u, key), (v - gaps).sum(axis=1))
