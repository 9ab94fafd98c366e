"""Base densities over scan-ordered point sequences.

``ARBase`` is the autoregressive scan likelihood: a stacked gated recurrence
summarises points ``< k`` and each point is scored by a dimension-wise
autoregressive Gaussian mixture conditioned on that summary. ``FlatGaussian``
and ``IIDBase`` are the ablation and baseline alternatives.
"""

from __future__ import annotations

import math

import numpy as np

from . import core as C
from .core import Tensor, as_tensor, no_grad
from .errors import SchemaError
from .layers import MLP, GatedCell

LOG_SCALE_BOUND = 7.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def mixture_log_prob(raw, value, k):
    """Log density of ``value`` under a ``k``-component 1-d Gaussian mixture
    whose logits, means and log-scales are the three ``k``-blocks of ``raw``."""
    logits = C.log_softmax(raw[..., :k], axis=-1)
    mu = raw[..., k:2 * k]
    log_scale = C.soft_clamp(raw[..., 2 * k:], LOG_SCALE_BOUND)
    v = C.reshape(value, value.shape + (1,))
    t = (v - mu) * C.exp(-log_scale)
    comp = t * t * -0.5 - log_scale - HALF_LOG_2PI
    return C.logsumexp(logits + comp, axis=-1)


def _sample_mixture(raw, k, rng):
    logits = raw[..., :k]
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(p.shape[:-1] + (1,))
    idx = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), k - 1)[..., None]
    mu = np.take_along_axis(raw[..., k:2 * k], idx, axis=-1)[..., 0]
    ls = np.take_along_axis(raw[..., 2 * k:], idx, axis=-1)[..., 0]
    ls = LOG_SCALE_BOUND * np.tanh(ls / LOG_SCALE_BOUND)
    return mu + np.exp(ls) * rng.standard_normal(mu.shape)


class MixtureConditional:
    """``p(point | context) = prod_j p(point_j | context, point_<j)``, each
    factor a ``components``-Gaussian mixture from its own perceptron."""

    def __init__(self, store, prefix, ctx_dim, d, rng, components=10, hidden=64):
        self.d = d
        self.k = components
        self.heads = [MLP(store, f"{prefix}.dim{j}", [ctx_dim + j, hidden, hidden, 3 * components], rng)
                      for j in range(d)]

    def log_prob(self, ctx, points):
        total = None
        for j, head in enumerate(self.heads):
            inp = ctx if j == 0 else C.concat([ctx, points[..., :j]], axis=-1)
            lp = mixture_log_prob(head(inp), points[..., j], self.k)
            total = lp if total is None else total + lp
        return total

    def sample(self, ctx, rng):
        ctx = as_tensor(ctx)
        cols = []
        with no_grad():
            for j, head in enumerate(self.heads):
                inp = ctx if j == 0 else C.concat([ctx, Tensor(np.stack(cols, axis=-1))], axis=-1)
                cols.append(_sample_mixture(head(inp).data, self.k, rng))
        return np.stack(cols, axis=-1)


class ARBase:
    """Autoregressive scan likelihood ``prod_k p(z_k | h(z_<k))``."""

    kind = "ar"

    def __init__(self, store, prefix, d, rng, hidden=64, layers=2, components=10, mix_hidden=64):
        self.d = d
        self.cells = [GatedCell(store, f"{prefix}.rnn{l}", d if l == 0 else hidden, hidden, rng)
                      for l in range(layers)]
        self.mixture = MixtureConditional(store, f"{prefix}.mix", hidden, d, rng, components, mix_hidden)

    def initial_state(self, batch):
        return [cell.initial(batch) for cell in self.cells]

    def advance(self, state, point):
        """Feed one point (B, d) through every recurrence layer."""
        inp = as_tensor(point)
        new = []
        for cell, h in zip(self.cells, state):
            h = cell.step(h, cell.project(inp))
            new.append(h)
            inp = h
        return new

    def point_log_prob(self, point, state):
        return self.mixture.log_prob(state[-1], as_tensor(point))

    def contexts(self, z):
        """Top-layer state before each point: (B, n, H), teacher forced."""
        n = z.shape[1]
        inputs = z[:, :n - 1]
        states = None
        for cell in self.cells:
            states = cell.run(inputs)
            if len(states) > 1:
                inputs = C.stack(states[1:], axis=1)
        return C.stack(states, axis=1)

    def sequence_log_prob(self, z):
        z = as_tensor(z)
        return self.mixture.log_prob(self.contexts(z), z).sum(axis=1)

    def sample(self, n, batch, rng):
        pts = []
        with no_grad():
            state = self.initial_state(batch)
            for k in range(n):
                p = self.mixture.sample(state[-1], rng)
                pts.append(p)
                if k < n - 1:
                    state = self.advance(state, p)
        return np.stack(pts, axis=1)


class IIDBase:
    """Per-point density with no recurrence; the set likelihood is the
    product over points (exchangeable without sorting)."""

    kind = "iid"

    def __init__(self, store, prefix, d, rng, components=10, mix_hidden=64):
        self.d = d
        self.mixture = MixtureConditional(store, f"{prefix}.mix", 1, d, rng, components, mix_hidden)

    def point_log_prob(self, points):
        points = as_tensor(points)
        ctx = Tensor(np.ones(points.shape[:-1] + (1,)))
        return self.mixture.log_prob(ctx, points)

    def sequence_log_prob(self, z):
        return self.point_log_prob(z).sum(axis=1)

    def sample(self, n, batch, rng):
        return self.mixture.sample(np.ones((batch, n, 1)), rng)


class FlatGaussian:
    """Full-covariance Gaussian on the flattened scan ``vec(z)`` of length
    ``n*d``, parameterised by an upper-triangular precision factor ``U``:
    ``log p(v) = -|(v - mu) U|^2 / 2 + sum log diag U - D/2 log 2 pi``."""

    kind = "flat"

    def __init__(self, store, prefix, n, d):
        self.n, self.d = n, d
        D = n * d
        self.mu = store.add(f"{prefix}.mu", np.zeros(D))
        self.log_diag = store.add(f"{prefix}.log_diag", np.zeros(D))
        self.upper = store.add(f"{prefix}.upper", np.zeros((D, D)))
        self._mask = np.triu(np.ones((D, D)), 1)
        self._eye = np.eye(D)

    def factor(self):
        return self.upper * Tensor(self._mask) + Tensor(self._eye) * C.exp(self.log_diag)

    def sequence_log_prob(self, z):
        z = as_tensor(z)
        B = z.shape[0]
        D = self.n * self.d
        e = C.matmul(C.reshape(z, (B, D)) - self.mu, self.factor())
        return (e * e).sum(axis=1) * -0.5 + self.log_diag.sum() - D * HALF_LOG_2PI

    def sample(self, n, batch, rng):
        if n != self.n:
            raise SchemaError(f"flat base was built for n={self.n}, asked to sample n={n}")
        D = self.n * self.d
        with no_grad():
            U = self.factor().data
        e = rng.standard_normal((batch, D))
        v = self.mu.data + np.linalg.solve(U.T, e.T).T
        return v.reshape(batch, self.n, self.d)
