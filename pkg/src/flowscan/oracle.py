"""Brute-force reference computations.

Everything here works on plain numpy arrays and uses its own density
formulas, so it can check the model code without sharing its code paths.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.linalg import lu_factor

from .errors import BudgetError, SingularJacobianError, TractabilityError

FD_STEP = 1e-5
MAX_PERM_N = 9
GRID_BUDGET = 10 ** 7


def _logsumexp(v, axis=None):
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else float(out.squeeze())


def _log_normal(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * math.log(2.0 * math.pi)


def sinusoid_log_prob_seq(xs, noise_sd=None):
    """Closed-form log density of *ordered* sinusoid sequences ``xs`` (..., n, 2)."""
    xs = np.asarray(xs, dtype=float)
    n = xs.shape[-2]
    sd = 1.0 / n if noise_sd is None else noise_sd
    first = xs[..., 0, :]
    lp = _log_normal(first[..., 0], 2.0, sd)
    lp = lp + _log_normal(first[..., 1], 0.0, sd * math.sqrt(1.0 + (math.pi / 3.0) ** 2))
    for k in range(2, n + 1):
        c = math.cos(math.pi * k / n)
        lp = lp + _log_normal(xs[..., k - 1, 0], first[..., 0] * c, sd)
        lp = lp + _log_normal(xs[..., k - 1, 1], np.cos(math.pi * k / n + first[..., 1]), sd)
    return lp


def perm_avg_log_prob(log_p_seq, x, chunk=50000):
    """``log (1/n!) sum_pi p_seq(x[pi])`` by full enumeration.

    ``log_p_seq`` maps an array (m, n, d) of ordered sequences to (m,).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n > MAX_PERM_N:
        raise TractabilityError(f"n={n} exceeds the enumeration cap of {MAX_PERM_N}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    parts = [np.asarray(log_p_seq(x[perms[i:i + chunk]]), dtype=float)
             for i in range(0, len(perms), chunk)]
    return _logsumexp(np.concatenate(parts)) - math.lgamma(n + 1)


def ground_truth_sinusoid_ppll(dataset, noise_sd=None):
    """Exact per-point log likelihood of each set under the shuffled
    sinusoid process (permutation average of the closed-form sequence density)."""
    if noise_sd is None:
        noise_sd = dataset.meta.get("noise_sd") if hasattr(dataset, "meta") else None
    sets = dataset.sets if hasattr(dataset, "sets") else list(dataset)
    out = np.empty(len(sets))
    for i, s in enumerate(sets):
        n = s.shape[0]
        lp = perm_avg_log_prob(lambda xs: sinusoid_log_prob_seq(xs, noise_sd), s)
        out[i] = lp / n
    return out


def trapezoid_weights(lo, hi, m):
    w = np.full(m, (hi - lo) / (m - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def grid_normalization(logp, box, resolution, chunk=200000):
    """Trapezoidal estimate of ``integral exp(logp)`` over the box
    ``[(lo, hi), ...]``; ``logp`` maps an array (m, D) to (m,)."""
    D = len(box)
    res = [resolution] * D if np.isscalar(resolution) else list(resolution)
    total_pts = int(np.prod(res, dtype=np.int64))
    if total_pts > GRID_BUDGET:
        raise BudgetError(f"{total_pts} grid points exceed the budget of {GRID_BUDGET}")
    axes = [np.linspace(lo, hi, m) for (lo, hi), m in zip(box, res)]
    weights = [trapezoid_weights(lo, hi, m) for (lo, hi), m in zip(box, res)]
    total = 0.0
    for start in range(0, total_pts, chunk):
        flat = np.arange(start, min(start + chunk, total_pts))
        idx = np.unravel_index(flat, res)
        pts = np.stack([a[i] for a, i in zip(axes, idx)], axis=1)
        w = np.prod([wt[i] for wt, i in zip(weights, idx)], axis=0)
        total += float(np.sum(w * np.exp(np.asarray(logp(pts), dtype=float))))
    return total


def fd_jacobian(fn, x, step=FD_STEP):
    """Central-difference Jacobian of ``fn: (n, d) -> (n, d)`` flattened to (nd, nd)."""
    x = np.asarray(x, dtype=float)
    size = x.size
    J = np.empty((size, size))
    flat = x.reshape(-1)
    for i in range(size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        J[:, i] = (np.asarray(fn(xp.reshape(x.shape))).reshape(-1)
                   - np.asarray(fn(xm.reshape(x.shape))).reshape(-1)) / (2 * step)
    return J


def lu_logabsdet(J, rtol=1e-8):
    """``log|det J|`` via LU with partial pivoting; numerically singular
    matrices raise :class:`SingularJacobianError`."""
    lu, _ = lu_factor(J, check_finite=True)
    piv = np.abs(np.diag(lu))
    if piv.min() <= rtol * max(1.0, piv.max()):
        raise SingularJacobianError(f"Jacobian is singular (smallest pivot {piv.min():.3g})")
    return float(np.sum(np.log(piv)))


def fd_jacobian_logdet(fn, x, step=FD_STEP):
    if np.asarray(x).size > 64:
        raise TractabilityError("dense finite-difference Jacobian limited to nd <= 64")
    return lu_logabsdet(fd_jacobian(fn, x, step))


def fd_gradient(loss_fn, params, step=FD_STEP):
    """Central differences of a scalar ``loss_fn()`` with respect to each
    array in ``params`` (perturbed in place and restored)."""
    grads = []
    for p in params:
        g = np.empty(p.shape)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a, b, floor=0.0):
    """``|a - b| / max(|a|, |b|, floor)`` on flattened vectors (0 when the
    scale vanishes). A ``floor`` of 1 makes the error absolute for values
    near zero, where a ratio says nothing."""
    a = np.concatenate([np.ravel(v) for v in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(v) for v in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
