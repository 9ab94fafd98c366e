"""Oracle-backed property checks behind ``flowscan verify``.

Each check returns a :class:`CheckResult`; sizes are parameters so the
acceptance tests can run the same checks at full strength.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import core as C
from . import oracle
from .core import Tensor, backward, no_grad
from .model import ABLATIONS, FlowScan, FlowScanConfig
from .optim import ParamStore
from .scan import CorrespondenceCoupling, OrderMap, RecurrentCoupling, factorial_correction, sort_scan
from .transforms import (DimensionMask, LeakyReLUFlow, LPEq, NWPEq, PointwiseCoupling,
                         SetCoupling, compose)

SCOPES = ("all", "core", "transforms", "scan", "model")
EQUIVARIANT_KINDS = ("coupling", "setcoupling", "leakyrelu", "lpeq", "nwpeq")
SCAN_KINDS = ("correspondence-even", "correspondence-odd", "recurrent", "order-map")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name:<28} {self.seconds:7.2f}s  {self.detail}"


def perturb(store, rng, scale=0.3):
    """Add Gaussian noise to every parameter so checks see generic values."""
    for p in store:
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.data.shape), dtype=float)


def build_transform(kind, d, rng, scale=0.3, mask_index=0):
    """A freshly built transform of ``kind`` with randomized parameters."""
    store = ParamStore()
    mask = DimensionMask.alternating(d, mask_index) if d >= 2 else None
    if kind == "coupling":
        t = PointwiseCoupling(store, "t", mask, rng, hidden=(16, 16))
    elif kind == "setcoupling":
        t = SetCoupling(store, "t", mask, rng, hidden=(16, 16), width=8)
    elif kind == "leakyrelu":
        t = LeakyReLUFlow(store, "t", slope=float(rng.uniform(0.2, 0.9)))
    elif kind == "lpeq":
        t = LPEq(store, "t", d)
    elif kind == "nwpeq":
        t = NWPEq(store, "t", d, beta=0.5)
    elif kind.startswith("correspondence"):
        t = CorrespondenceCoupling(store, "t", d, kind.split("-")[1], rng, hidden=(16, 16))
    elif kind == "order-map":
        t = OrderMap(d, int(rng.integers(d)))
    elif kind == "recurrent":
        t = RecurrentCoupling(store, "t", d, rng, hidden=8, head_hidden=16)
    else:
        raise ValueError(kind)
    perturb(store, rng, scale)
    return t


def _as_fn(t):
    def fn(a):
        with no_grad():
            return t(Tensor(a[None]), "forward").output.data[0]
    return fn


def _timed(name, fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


# core

def check_autodiff(seed=0, points=10, tol=1e-4):
    """Random 2-3-2 tanh perceptron (17 parameters) against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        store = ParamStore()
        w0 = store.add("w0", rng.normal(size=(2, 3)))
        b0 = store.add("b0", rng.normal(size=3))
        w1 = store.add("w1", rng.normal(size=(3, 2)))
        b1 = store.add("b1", rng.normal(size=2))
        x = rng.normal(size=(5, 2))

        def loss():
            h = C.tanh(C.matmul(Tensor(x), w0) + b0)
            out = C.matmul(h, w1) + b1
            return C.logsumexp(out, axis=-1).sum() + (C.sigmoid(out) * out).mean()

        L = loss()
        backward(L, store)
        analytic = [p.grad.copy() for p in store]
        numeric = oracle.fd_gradient(lambda: loss().data, [p.data for p in store])
        worst = max(worst, oracle.relative_error(analytic, numeric))
    return worst <= tol, f"max rel. error {worst:.2e} over {points} points (tol {tol:g})"


# transforms

def check_equivariance(trials=20, seed=1, tol=1e-9, kinds=EQUIVARIANT_KINDS):
    rng = np.random.default_rng(seed)
    worst_out = worst_ld = 0.0
    for kind in kinds:
        for trial in range(trials):
            d = int(rng.integers(2, 4))
            n = int(rng.integers(2, 7))
            t = build_transform(kind, d, rng, mask_index=trial)
            x = rng.normal(size=(3, n, d))
            perm = rng.permutation(n)
            with no_grad():
                y, ld = t(x)
                yp, ldp = t(x[:, perm])
            worst_out = max(worst_out, float(np.abs(yp.data - y.data[:, perm]).max()))
            worst_ld = max(worst_ld, float(np.abs(ldp.data - ld.data).max()))
    ok = worst_out <= tol and worst_ld <= tol
    return ok, f"max |T(Px)-P T(x)| {worst_out:.1e}, max logdet diff {worst_ld:.1e} (tol {tol:g})"


def random_stack(rng, d, depth=6):
    kinds = [k for k in EQUIVARIANT_KINDS if d >= 2 or k not in ("coupling", "setcoupling")]
    return [build_transform(kinds[int(rng.integers(len(kinds)))], d, rng, mask_index=i)
            for i in range(depth)]


def check_invertibility(trials=50, seed=2, tol=1e-8, rec_tol=1e-7):
    rng = np.random.default_rng(seed)
    worst = {}
    cases = [(k, tol) for k in EQUIVARIANT_KINDS + SCAN_KINDS if k != "recurrent"]
    cases += [("recurrent", rec_tol), ("stack6", tol)]
    for kind, _ in cases:
        w = 0.0
        for _ in range(trials):
            d = int(rng.integers(2, 4))
            n = int(rng.integers(2, 7))
            x = rng.normal(size=(2, n, d))
            if kind in SCAN_KINDS:
                x = np.sort(x, axis=1)
            with no_grad():
                if kind == "stack6":
                    stack = random_stack(rng, d)
                    y, _ = compose(stack, x)
                    back, _ = compose(stack, y, "inverse")
                else:
                    t = build_transform(kind, d, rng)
                    y, _ = t(x)
                    back, _ = t(y, "inverse")
            w = max(w, float(np.abs(back.data - x).max()))
        worst[kind] = w
    bad = [k for k, t in cases if worst[k] > t]
    top = max(worst, key=worst.get)
    detail = f"worst round trip {worst[top]:.1e} ({top}); {trials} trials per transform"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return not bad, detail


def lpeq_closed_form_logdet():
    """FD log|det| of L-PEq at n=3, d=1, lambda=2, gamma=1 (expected 2 log 2 + log 3)."""
    store = ParamStore()
    t = LPEq(store, "t", 1, lam=2.0, gam=1.0)
    x = np.random.default_rng(0).normal(size=(3, 1))
    with no_grad():
        analytic = float(t(Tensor(x[None])).logdet.data[0])
    return analytic, oracle.fd_jacobian_logdet(_as_fn(t), x)


def check_jacobian(points=10, seed=3, tol=1e-4, kinds=EQUIVARIANT_KINDS, closed_form=True):
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in kinds:
        w = 0.0
        for i in range(points):
            d = int(rng.integers(2, 4))
            n = int(rng.integers(2, 5))
            t = build_transform(kind, d, rng, mask_index=i)
            x = rng.normal(size=(n, d))
            if kind in SCAN_KINDS:
                x = np.sort(x, axis=0)
            with no_grad():
                analytic = float(t(Tensor(x[None])).logdet.data[0])
            w = max(w, oracle.relative_error(analytic, oracle.fd_jacobian_logdet(_as_fn(t), x), floor=1.0))
        worst[kind] = w
    if closed_form:
        analytic, fd = lpeq_closed_form_logdet()
        closed = 2 * math.log(2) + math.log(3)
        worst["lpeq-closed-form"] = max(oracle.relative_error(analytic, closed),
                                        oracle.relative_error(fd, closed))
    bad = [k for k, v in worst.items() if v > tol]
    top = max(worst, key=worst.get)
    detail = f"max rel. error {worst[top]:.1e} ({top}); tol {tol:g}"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return not bad, detail


def check_prop1(trials=20, seed=4, tol=1e-9):
    """Equivariant stack + i.i.d. standard normal base is permutation invariant."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(2, 7))
        stack = random_stack(rng, d)
        x = rng.normal(size=(2, n, d))

        def logp(a):
            with no_grad():
                y, ld = compose(stack, a)
            return ld.data - 0.5 * (y.data ** 2).sum(axis=(1, 2)) - 0.5 * n * d * math.log(2 * math.pi)

        perm = rng.permutation(n)
        worst = max(worst, float(np.abs(logp(x[:, perm]) - logp(x)).max()))
    return worst <= tol, f"max |log p(Px) - log p(x)| {worst:.1e} (tol {tol:g})"


# scan

class SymmetrizedMixture:
    """Exchangeable density for n=3, d=1: a two-component Gaussian mixture on
    R^3 with distinct per-coordinate means, averaged over all permutations."""

    def __init__(self):
        self.means = np.array([[-1.0, 0.5, 1.5], [0.8, -0.3, -1.2]])
        self.sds = np.array([[0.7, 1.0, 0.6], [0.9, 0.5, 0.8]])
        self.weights = np.array([0.4, 0.6])
        self.perms = np.array([[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]])

    def _mix(self, x):
        z = (x[:, None, :] - self.means) / self.sds
        comp = np.exp(-0.5 * (z ** 2).sum(-1)) / np.prod(self.sds * math.sqrt(2 * math.pi), axis=-1)
        return comp @ self.weights

    def density(self, x):
        """p_e(x) for points x of shape (m, 3)."""
        return np.mean([self._mix(x[:, p]) for p in self.perms], axis=0)

    def sorted_density(self, z):
        """p_s(z) = 3! p_e(z) on the ascending region, 0 elsewhere."""
        inside = np.all(np.diff(z, axis=1) >= 0, axis=1)
        return np.where(inside, 6.0 * self.density(z), 0.0)


def check_prop2(points=100, seed=5, tol=1e-10, resolution=101, norm_tol=0.02):
    ok_sort, detail_sort = check_sort_invariance()
    if not ok_sort:
        return False, detail_sort
    rng = np.random.default_rng(seed)
    pe = SymmetrizedMixture()

    def via_scan(x):
        scan = sort_scan(Tensor(x[:, :, None]), 0)
        return np.exp(scan.correction) * pe.sorted_density(scan.sorted.data[:, :, 0])

    x = rng.normal(scale=1.5, size=(points, 3))
    worst = float(np.abs(via_scan(x) - pe.density(x)).max())
    total = oracle.grid_normalization(lambda p: np.log(np.maximum(via_scan(p), 1e-300)),
                                      [(-5, 5)] * 3, resolution)
    ok = worst <= tol and abs(total - 1) <= norm_tol
    return ok, f"pointwise max diff {worst:.1e} (tol {tol:g}); grid integral {total:.4f}; sort invariant"


def check_sort_invariance(max_n=5, seed=6):
    rng = np.random.default_rng(seed)
    for n in range(1, max_n + 1):
        x = rng.normal(size=(n, 2))
        ref = sort_scan(Tensor(x[None]), 0).sorted.data
        for p in itertools.permutations(range(n)):
            if not np.array_equal(sort_scan(Tensor(x[None, list(p)]), 0).sorted.data, ref):
                return False, f"sorted output differs for n={n}, permutation {p}"
    if abs(factorial_correction(512) + math.lgamma(513)) > 1e-12 * math.lgamma(513):
        return False, "factorial correction mismatch at n=512"
    return True, f"bitwise identical sorted output over all permutations, n <= {max_n}"


def check_scan_couplings(points=10, trials=50, seed=7, tol=1e-4):
    ok_j, det_j = check_jacobian(points=points, seed=seed, tol=tol, kinds=SCAN_KINDS, closed_form=False)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for kind in SCAN_KINDS:
        lim = 1e-7 if kind == "recurrent" else 1e-8
        for _ in range(trials):
            d = int(rng.integers(1, 4))
            n = int(rng.integers(2, 8))
            t = build_transform(kind, d, rng)
            x = np.sort(rng.normal(size=(2, n, d)), axis=1)
            with no_grad():
                back = t(t(x).output, "inverse").output.data
            err = float(np.abs(back - x).max())
            worst = max(worst, err / lim)
    ok = ok_j and worst <= 1.0
    return ok, f"jacobian: {det_j}; round trip at {worst:.2f} of its tolerance"


# model

def random_configs(count, seed):
    """Model configurations spanning dimensions, stacks, bases and ablations."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(2, 9))
        kinds = ["leakyrelu", "lpeq", "nwpeq"] + (["coupling", "setcoupling"] if d >= 2 else [])
        depth = int(rng.integers(1, 5))
        stack = tuple(kinds[int(j)] for j in rng.integers(len(kinds), size=depth))
        cfg = FlowScanConfig(d=d, n=n, equivariant=stack, correspondence=int(rng.integers(0, 4)),
                             recurrent=int(rng.integers(0, 2)), sort_key=int(rng.integers(d)),
                             hidden=8, layers=int(rng.integers(1, 3)), components=3, mix_hidden=8,
                             coupling_hidden=8, embed_width=4, rec_hidden=4, init_seed=i)
        variant = ABLATIONS[i % len(ABLATIONS)]
        if i % 5 == 4:
            cfg = replace(cfg, base="iid")
        out.append(cfg.ablation(variant))
    return out


def check_exchangeability(configs=20, perms=100, seed=8, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for cfg in random_configs(configs, seed):
        model = FlowScan(cfg)
        perturb(model.store, rng, 0.2)
        x = rng.normal(size=(4, cfg.n, cfg.d))
        with no_grad():
            ref = model.log_prob(x).data
            for _ in range(perms):
                p = rng.permutation(cfg.n)
                worst = max(worst, float(np.abs(model.log_prob(x[:, p]).data - ref).max()))
    return worst <= tol, f"max |log p(Px) - log p(x)| {worst:.1e} over {configs} configs x {perms} perms"


def model_normalization(config, resolution=1000, box=6.0):
    model = FlowScan(config)

    def logp(pts):
        # the density vanishes as two keys meet, so grid points on the
        # diagonal take that limit instead of going through the log-gap map
        out = np.full(len(pts), -np.inf)
        keep = pts[:, 0] != pts[:, 1]
        with no_grad():
            out[keep] = model.log_prob(pts[keep].reshape(-1, 2, 1)).data
        return out

    return oracle.grid_normalization(logp, [(-box, box)] * 2, resolution)


def check_normalization(resolution=1000, seeds=(0,), tol=0.02):
    vals = [model_normalization(FlowScanConfig(d=1, n=2, init_seed=s), resolution) for s in seeds]
    worst = max(abs(v - 1) for v in vals)
    return worst <= tol, f"grid integrals {', '.join(f'{v:.4f}' for v in vals)} (tol {tol:g})"


def miniature_config():
    return FlowScanConfig(d=2, n=3, equivariant=("setcoupling", "nwpeq", "leakyrelu"), correspondence=2,
                          hidden=8, layers=1, components=2, mix_hidden=8, coupling_hidden=4,
                          embed_width=4, init_seed=0)


def check_model_gradient(seed=9, tol=1e-4, config=None):
    rng = np.random.default_rng(seed)
    model = FlowScan(config or miniature_config())
    perturb(model.store, rng, 0.2)
    x = rng.normal(size=(4, model.config.n, model.config.d))
    loss = model.ppll(x).mean()
    backward(loss, model.store)
    analytic = [p.grad.copy() for p in model.store]
    with no_grad():
        numeric = oracle.fd_gradient(lambda: model.ppll(x).mean().data, [p.data for p in model.store])
    err = oracle.relative_error(analytic, numeric)
    return err <= tol, f"rel. error {err:.1e} over {model.num_values()} parameters (tol {tol:g})"


CHECKS = {
    "core": [("autodiff-gradients", check_autodiff)],
    "transforms": [
        ("equivariance", check_equivariance),
        ("invertibility", check_invertibility),
        ("jacobian", check_jacobian),
        ("prop1-invariance", check_prop1),
    ],
    "scan": [
        ("prop2-sort-theorem", check_prop2),
        ("scan-couplings", check_scan_couplings),
    ],
    "model": [
        ("exchangeability", lambda: check_exchangeability(configs=8, perms=20)),
        ("normalization", lambda: check_normalization(resolution=400)),
        ("model-gradient", check_model_gradient),
    ],
}


def run(scope="all"):
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    groups = [g for g in CHECKS if scope in ("all", g)]
    results = []
    for g in groups:
        for name, fn in CHECKS[g]:
            try:
                results.append(_timed(name, fn))
            except Exception as err:  # a crashing check is a failing check
                results.append(CheckResult(name, False, f"raised {type(err).__name__}: {err}"))
    return results
