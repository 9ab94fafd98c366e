"""Perceptrons and the gated recurrent cell used by transforms and densities."""

from __future__ import annotations

import numpy as np

from . import core as C


class MLP:
    """tanh perceptron ``sizes[0] -> ... -> sizes[-1]`` with a linear output.

    The output layer starts at ``out_scale`` times the usual fan-in scale so
    freshly built flows are close to (but not exactly) the identity.
    """

    def __init__(self, store, prefix, sizes, rng, out_scale=1e-2):
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            scale = (out_scale if last else 1.0) / np.sqrt(max(a, 1))
            self.weights.append(store.add(f"{prefix}.w{i}", rng.normal(0.0, scale, (a, b))))
            self.biases.append(store.add(f"{prefix}.b{i}", np.zeros(b)))

    def __call__(self, x):
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = C.matmul(h, w) + b
            if i < n - 1:
                h = C.tanh(h)
        return h

    def zero_output(self):
        self.weights[-1].data[...] = 0.0
        self.biases[-1].data[...] = 0.0


class GatedCell:
    """Gated additive recurrence ``h' = h + u * c``.

    ``u`` (update) and ``r`` (reset) are sigmoid gates and ``c`` is a tanh
    candidate, as in a GRU, but the candidate is added to the state rather
    than interpolated, so all-zero weights leave the state untouched.
    """

    def __init__(self, store, prefix, in_dim, hidden, rng):
        self.hidden = hidden
        self.wx = store.add(f"{prefix}.wx", rng.normal(0.0, 1.0 / np.sqrt(max(in_dim, 1)), (in_dim, 3 * hidden)))
        self.bx = store.add(f"{prefix}.bx", np.zeros(3 * hidden))
        self.wh = store.add(f"{prefix}.wh", rng.normal(0.0, 0.5 / np.sqrt(hidden), (hidden, 3 * hidden)))
        self.h0 = store.add(f"{prefix}.h0", np.zeros(hidden))

    def initial(self, batch):
        return C.add(C.Tensor(np.zeros((batch, self.hidden))), self.h0)

    def project(self, x):
        return C.matmul(x, self.wx) + self.bx

    def step(self, h, ax):
        H = self.hidden
        hh = C.matmul(h, self.wh)
        u = C.sigmoid(ax[..., :H] + hh[..., :H])
        r = C.sigmoid(ax[..., H:2 * H] + hh[..., H:2 * H])
        c = C.tanh(ax[..., 2 * H:] + r * hh[..., 2 * H:])
        return h + u * c

    def run(self, x_seq, h=None):
        """Teacher-forced pass over ``x_seq`` (B, T, in); returns the T + 1
        states (initial state first) as a list of (B, H) tensors."""
        B, T = x_seq.shape[:2]
        h = self.initial(B) if h is None else h
        states = [h]
        if T:
            ax = self.project(x_seq)
            for t in range(T):
                h = self.step(h, ax[:, t])
                states.append(h)
        return states
