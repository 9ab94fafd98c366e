"""Invertible, permutation-equivariant transforms of point sets.

All transforms act on tensors of shape ``(B, n, d)`` (a batch of ``B`` sets of
``n`` points in ``d`` dimensions) and return a :class:`TransformResult` whose
``logdet`` has shape ``(B,)``. Inverses return the log-determinant of the
inverse map, i.e. the negated forward log-determinant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import core as C
from .core import Tensor, as_tensor
from .errors import ConfigError, FlowScanError, SchemaError
from .layers import MLP

SCALE_BOUND = 4.0

# Fault-injection hooks consumed by ``flowscan verify``. Never set in normal use.
FAULTS: set[str] = set()
KNOWN_FAULTS = ("lpeq_logdet",)


class TransformResult(NamedTuple):
    output: Tensor
    logdet: Tensor


@dataclass(frozen=True)
class DimensionMask:
    """Split of the ``d`` point dimensions into a transformed block and its
    conditioning complement (0-based indices)."""

    d: int
    transformed: tuple

    def __post_init__(self):
        s = tuple(sorted(set(self.transformed)))
        if not s:
            raise ConfigError("mask must transform at least one dimension")
        if s[0] < 0 or s[-1] >= self.d:
            raise ConfigError(f"mask dimensions {s} out of range for d={self.d}")
        object.__setattr__(self, "transformed", s)

    @property
    def cond(self):
        return tuple(j for j in range(self.d) if j not in self.transformed)

    @classmethod
    def alternating(cls, d, k):
        """k-th mask of the alternating schedule: even then odd 0-based dims."""
        return cls(d, tuple(range(k % 2, d, 2)) or (0,))

    @classmethod
    def keep_key(cls, d, k, key):
        """k-th mask of the alternating schedule over the dims other than
        ``key``. The key dim always conditions and is never transformed."""
        rest = [j for j in range(d) if j != key]
        if not rest:
            raise ConfigError("a key-preserving mask needs d >= 2")
        if len(rest) == 1:
            return cls(d, tuple(rest))
        return cls(d, tuple(rest[k % 2::2]))


def _columns(x, dims):
    dims = list(dims)
    if dims == list(range(dims[0], dims[-1] + 1)):
        return x[..., dims[0]:dims[-1] + 1]
    return C.concat([x[..., j:j + 1] for j in dims], axis=-1)


def _merge(d, mask, xs, xc):
    cols = []
    s_pos = {j: i for i, j in enumerate(mask.transformed)}
    c_pos = {j: i for i, j in enumerate(mask.cond)}
    for j in range(d):
        if j in s_pos:
            cols.append(xs[..., s_pos[j]:s_pos[j] + 1])
        else:
            cols.append(xc[..., c_pos[j]:c_pos[j] + 1])
    return C.concat(cols, axis=-1)


def _per_set(value, batch):
    """Broadcast a scalar log-determinant tensor to shape (B,)."""
    return C.add(Tensor(np.zeros(batch)), value)


def _check_direction(direction):
    if direction not in ("forward", "inverse"):
        raise ConfigError(f"direction must be 'forward' or 'inverse', got {direction!r}")


class Transform:
    name = "transform"
    d = None   # point dimension the transform was built for, if fixed

    def forward(self, x) -> TransformResult:
        raise NotImplementedError

    def inverse(self, y) -> TransformResult:
        raise NotImplementedError

    def __call__(self, x, direction="forward"):
        _check_direction(direction)
        x = as_tensor(x)
        if x.ndim != 3:
            raise SchemaError(f"{self.name}: expected sets shaped (B, n, d), got {x.shape}")
        if self.d is not None and x.shape[2] != self.d:
            raise SchemaError(f"{self.name}: built for d={self.d}, got d={x.shape[2]}")
        return self.forward(x) if direction == "forward" else self.inverse(x)


class PointwiseCoupling(Transform):
    """Affine coupling applied identically to every point:
    ``x[S] -> exp(f(x[S^c])) * x[S] + g(x[S^c])``."""

    name = "coupling"

    def __init__(self, store, prefix, mask, rng, hidden=(64, 64)):
        if not mask.cond:
            raise ConfigError("coupling needs a nonempty conditioning set (d >= 2)")
        self.mask = mask
        self.d = mask.d
        k = len(mask.transformed)
        self.net = MLP(store, f"{prefix}.net", [len(mask.cond), *hidden, 2 * k], rng)

    def _scale_shift(self, xc):
        out = self.net(xc)
        k = len(self.mask.transformed)
        return C.soft_clamp(out[..., :k], SCALE_BOUND), out[..., k:]

    def forward(self, x):
        xs, xc = _columns(x, self.mask.transformed), _columns(x, self.mask.cond)
        f, g = self._scale_shift(xc)
        y = _merge(self.mask.d, self.mask, C.exp(f) * xs + g, xc)
        return TransformResult(y, f.sum(axis=(1, 2)))

    def inverse(self, y):
        ys, yc = _columns(y, self.mask.transformed), _columns(y, self.mask.cond)
        f, g = self._scale_shift(yc)
        x = _merge(self.mask.d, self.mask, (ys - g) * C.exp(-f), yc)
        return TransformResult(x, -f.sum(axis=(1, 2)))


class SetEmbedding:
    """Permutation-invariant set features: per-point MLP, mean-pool, MLP."""

    def __init__(self, store, prefix, in_dim, rng, width=32, hidden=64):
        self.width = width
        self.point_net = MLP(store, f"{prefix}.point", [in_dim, hidden, width], rng, out_scale=1.0)
        self.set_net = MLP(store, f"{prefix}.set", [width, hidden, width], rng, out_scale=1.0)

    def __call__(self, x_cond):
        return self.set_net(self.point_net(as_tensor(x_cond)).mean(axis=1))


class SetCoupling(Transform):
    """Coupling whose scale and shift see both the point's own conditioning
    coordinates and an invariant embedding of the whole set's."""

    name = "setcoupling"

    def __init__(self, store, prefix, mask, rng, hidden=(64, 64), width=32):
        if not mask.cond:
            raise ConfigError("set-coupling needs a nonempty conditioning set (d >= 2)")
        self.mask = mask
        self.d = mask.d
        k = len(mask.transformed)
        c = len(mask.cond)
        self.embed = SetEmbedding(store, f"{prefix}.embed", c, rng, width=width, hidden=hidden[0])
        self.net = MLP(store, f"{prefix}.net", [width + c, *hidden, 2 * k], rng)

    def _scale_shift(self, xc):
        B, n = xc.shape[:2]
        phi = self.embed(xc)
        phi = C.reshape(phi, (B, 1, self.embed.width)) + Tensor(np.zeros((1, n, 1)))
        out = self.net(C.concat([phi, xc], axis=-1))
        k = len(self.mask.transformed)
        return C.soft_clamp(out[..., :k], SCALE_BOUND), out[..., k:]

    forward = PointwiseCoupling.forward
    inverse = PointwiseCoupling.inverse


class LeakyReLUFlow(Transform):
    """Elementwise ``x if x >= 0 else slope * x`` with a learnable slope."""

    name = "leakyrelu"

    def __init__(self, store, prefix, slope=0.5):
        if not slope > 0:
            raise ConfigError(f"leaky-ReLU slope must be positive, got {slope}")
        self.log_slope = store.add(f"{prefix}.log_slope", np.log(slope))

    def forward(self, x):
        return leaky_relu_flow(x, C.exp(self.log_slope), "forward", log_slope=self.log_slope)

    def inverse(self, y):
        return leaky_relu_flow(y, C.exp(self.log_slope), "inverse", log_slope=self.log_slope)


def leaky_relu_flow(x, slope, direction="forward", log_slope=None):
    _check_direction(direction)
    x = as_tensor(x)
    slope = as_tensor(slope)
    if not np.all(slope.data > 0):
        raise ConfigError(f"leaky-ReLU slope must be positive, got {slope.data}")
    if log_slope is None:
        log_slope = C.log(slope)
    neg = (x.data < 0).astype(np.float64)
    factor = C.add(1.0, Tensor(neg) * (slope - 1.0))
    count = neg.sum(axis=(1, 2))
    if direction == "forward":
        return TransformResult(x * factor, Tensor(count) * log_slope)
    return TransformResult(x / factor, Tensor(-count) * log_slope)


def _check_nondegenerate(lam, tot):
    if np.any(lam.data == 0) or np.any(tot.data == 0):
        raise ConfigError("equivariant linear map is singular: need lambda != 0 and lambda + gamma != 0")


def _peq_logdet(lam, tot, n, batch, fault=None):
    ld = (C.log_abs(lam) * float(n - 1) + C.log_abs(tot)).sum()
    if fault in FAULTS:
        ld = ld + 0.1
    return _per_set(ld, batch)


def lpeq(x, lam, gam, direction="forward"):
    """``x_i -> lam * x_i + gam * mean_k x_k`` per dimension."""
    _check_direction(direction)
    x, lam, gam = as_tensor(x), as_tensor(lam), as_tensor(gam)
    tot = lam + gam
    _check_nondegenerate(lam, tot)
    B, n = x.shape[:2]
    m = x.mean(axis=1, keepdims=True)
    ld = _peq_logdet(lam, tot, n, B, fault="lpeq_logdet")
    if direction == "forward":
        return TransformResult(lam * x + gam * m, ld)
    return TransformResult(x / lam - (gam / (lam * tot)) * m, -ld)


def nwpeq_softmax(x, lam, gam, beta, direction="forward"):
    """``x_i -> lam * x_i + gam * softmax(beta * x)-weighted mean`` per
    dimension. The weights are shift invariant, so the inverse recomputes them
    from ``z / lam``."""
    _check_direction(direction)
    x, lam, gam, beta = as_tensor(x), as_tensor(lam), as_tensor(gam), as_tensor(beta)
    tot = lam + gam
    _check_nondegenerate(lam, tot)
    B, n = x.shape[:2]
    ld = _peq_logdet(lam, tot, n, B)
    if direction == "forward":
        w = C.softmax(beta * x, axis=1)
        eta = (w * x).sum(axis=1, keepdims=True)
        return TransformResult(lam * x + gam * eta, ld)
    w = C.softmax(beta * x / lam, axis=1)
    s = (w * x).sum(axis=1, keepdims=True)
    return TransformResult(x / lam - (gam / (lam * tot)) * s, -ld)


class LPEq(Transform):
    """Learnable L-PEq with ``lam = exp(a)`` and ``lam + gam = exp(b)``."""

    name = "lpeq"

    def __init__(self, store, prefix, d, lam=1.0, gam=0.0):
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (d,))
        tot = lam + np.broadcast_to(np.asarray(gam, dtype=float), (d,))
        if np.any(lam <= 0) or np.any(tot <= 0):
            raise ConfigError("LPEq parameterization needs lambda > 0 and lambda + gamma > 0")
        self.d = d
        self.a = store.add(f"{prefix}.log_lam", np.log(lam))
        self.b = store.add(f"{prefix}.log_tot", np.log(tot))

    def coefficients(self):
        lam = C.exp(self.a)
        return lam, C.exp(self.b) - lam

    def forward(self, x):
        return lpeq(x, *self.coefficients(), "forward")

    def inverse(self, y):
        return lpeq(y, *self.coefficients(), "inverse")


class NWPEq(LPEq):
    """Softmax-weighted NW-PEq with a learnable inverse temperature per dimension."""

    name = "nwpeq"

    def __init__(self, store, prefix, d, lam=1.0, gam=0.0, beta=0.0):
        super().__init__(store, prefix, d, lam, gam)
        self.beta = store.add(f"{prefix}.beta", np.broadcast_to(np.asarray(beta, dtype=float), (d,)).copy())

    def forward(self, x):
        return nwpeq_softmax(x, *self.coefficients(), self.beta, "forward")

    def inverse(self, y):
        return nwpeq_softmax(y, *self.coefficients(), self.beta, "inverse")


def _annotate(err, i, t):
    err.args = (f"stack[{i}] ({getattr(t, 'name', type(t).__name__)}): {err}",) + err.args[1:]
    return err


def compose(stack, x, direction="forward"):
    """Apply ``stack`` in order (forward) or its inverses in reverse order,
    summing log-determinants. An empty stack is the identity."""
    _check_direction(direction)
    x = as_tensor(x)
    logdet = Tensor(np.zeros(x.shape[0]))
    items = list(enumerate(stack))
    if direction == "inverse":
        items.reverse()
    for i, t in items:
        try:
            x, ld = t(x, direction)
        except FlowScanError as err:
            raise _annotate(err, i, t) from None
        logdet = logdet + ld
    return TransformResult(x, logdet)
