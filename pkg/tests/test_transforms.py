import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowscan import oracle
from flowscan.core import Tensor, no_grad
from flowscan.errors import ConfigError
from flowscan.optim import ParamStore
from flowscan.transforms import (DimensionMask, LeakyReLUFlow, LPEq, NWPEq, PointwiseCoupling,
                                 SetCoupling, SetEmbedding, compose, leaky_relu_flow, lpeq,
                                 nwpeq_softmax)
from flowscan.verify import EQUIVARIANT_KINDS, build_transform, perturb

RNG = np.random.default_rng(1234)


def as_fn(t):
    def fn(a):
        with no_grad():
            return t(Tensor(a[None])).output.data[0]
    return fn


def analytic_logdet(t, x):
    with no_grad():
        return float(t(Tensor(x[None])).logdet.data[0])


def round_trip_error(t, x):
    with no_grad():
        y = t(x).output
        return float(np.abs(t(y, "inverse").output.data - x).max())


def fix_output(mlp, bias):
    """Make an MLP constant: zero last weights, set last bias."""
    mlp.zero_output()
    mlp.biases[-1].data[:] = bias


# masks

def test_mask_complement():
    m = DimensionMask(3, (2, 0))
    assert m.transformed == (0, 2)
    assert m.cond == (1,)


@pytest.mark.parametrize("dims", [(), (3,), (-1,)])
def test_bad_masks_rejected(dims):
    with pytest.raises(ConfigError):
        DimensionMask(3, dims)


def test_alternating_schedule():
    assert DimensionMask.alternating(3, 0).transformed == (0, 2)
    assert DimensionMask.alternating(3, 1).transformed == (1,)


def test_key_preserving_schedule():
    assert DimensionMask.keep_key(2, 0, 0).transformed == (1,)
    assert DimensionMask.keep_key(2, 1, 0).transformed == (1,)
    assert DimensionMask.keep_key(3, 0, 1).transformed == (0,)
    assert DimensionMask.keep_key(3, 1, 1).transformed == (2,)
    assert 1 in DimensionMask.keep_key(3, 1, 1).cond
    with pytest.raises(ConfigError):
        DimensionMask.keep_key(1, 0, 0)


# pointwise coupling

def test_coupling_with_zero_nets_is_identity():
    t = PointwiseCoupling(ParamStore(), "c", DimensionMask(2, (1,)), RNG, hidden=(8,))
    t.net.zero_output()
    x = RNG.normal(size=(2, 3, 2))
    y, ld = t(x)
    assert np.array_equal(y.data, x)
    assert np.array_equal(ld.data, np.zeros(2))


def test_coupling_hand_example():
    t = PointwiseCoupling(ParamStore(), "c", DimensionMask(2, (1,)), RNG, hidden=(8,))
    # the scale passes through 4 tanh(./4); pick the raw bias that lands on log 2
    fix_output(t.net, [4 * math.atanh(math.log(2) / 4), 1.0])
    y, ld = t(np.array([[[3.0, 5.0]]]))
    assert np.allclose(y.data, [[[3.0, 11.0]]], atol=1e-12)
    assert ld.data[0] == pytest.approx(math.log(2), abs=1e-12)


def test_coupling_needs_conditioning_dims():
    with pytest.raises(ConfigError):
        PointwiseCoupling(ParamStore(), "c", DimensionMask(2, (0, 1)), RNG)


def test_coupling_round_trip_and_jacobian():
    t = build_transform("coupling", 2, RNG)
    x = RNG.normal(size=(3, 2))
    assert round_trip_error(t, x[None]) <= 1e-9
    assert oracle.relative_error(analytic_logdet(t, x), oracle.fd_jacobian_logdet(as_fn(t), x), floor=1.0) <= 1e-4


# leaky ReLU

def test_leaky_relu_hand_example():
    y, ld = leaky_relu_flow(np.array([[[1.0, -2.0]]]), 0.5)
    assert np.array_equal(y.data, [[[1.0, -1.0]]])
    assert ld.data[0] == pytest.approx(math.log(0.5))


def test_leaky_relu_positive_input_is_identity():
    x = np.abs(RNG.normal(size=(2, 4, 3)))
    y, ld = leaky_relu_flow(x, 0.3)
    assert np.array_equal(y.data, x)
    assert np.array_equal(ld.data, [0.0, 0.0])


def test_leaky_relu_round_trip():
    x = RNG.normal(size=(2, 5, 2))
    y, ld = leaky_relu_flow(x, 0.7)
    back, ld_inv = leaky_relu_flow(y, 0.7, "inverse")
    assert np.abs(back.data - x).max() <= 1e-12
    assert np.allclose(ld.data, -ld_inv.data)


@pytest.mark.parametrize("slope", [0.0, -1.0])
def test_leaky_relu_rejects_bad_slope(slope):
    with pytest.raises(ConfigError):
        leaky_relu_flow(np.ones((1, 1, 1)), slope)
    with pytest.raises(ConfigError):
        LeakyReLUFlow(ParamStore(), "l", slope)


# L-PEq

def test_lpeq_identity():
    x = RNG.normal(size=(2, 4, 3))
    y, ld = lpeq(x, np.ones(3), np.zeros(3))
    assert np.allclose(y.data, x, atol=0, rtol=0)
    assert np.array_equal(ld.data, [0.0, 0.0])


def test_lpeq_closed_form_logdet():
    x = RNG.normal(size=(1, 3, 1))
    _, ld = lpeq(x, np.array([2.0]), np.array([1.0]))
    dense = np.linalg.slogdet(2.0 * np.eye(3) + (1.0 / 3) * np.ones((3, 3)))[1]
    assert ld.data[0] == pytest.approx(2 * math.log(2) + math.log(3), abs=1e-12)
    assert ld.data[0] == pytest.approx(dense, abs=1e-12)


def test_lpeq_round_trip_random_coefficients():
    x = RNG.normal(size=(3, 5, 2))
    lam = RNG.uniform(0.3, 2.0, 2)
    gam = RNG.uniform(-0.2, 2.0, 2)
    y, ld = lpeq(x, lam, gam)
    back, ld_inv = lpeq(y, lam, gam, "inverse")
    assert np.abs(back.data - x).max() <= 1e-9
    assert np.allclose(ld.data, -ld_inv.data)


@pytest.mark.parametrize("lam,gam", [(0.0, 1.0), (1.0, -1.0)])
def test_lpeq_degenerate_raw_coefficients(lam, gam):
    with pytest.raises(ConfigError):
        lpeq(np.ones((1, 2, 1)), np.array([lam]), np.array([gam]))


def test_lpeq_parameterization_rejects_nonpositive():
    with pytest.raises(ConfigError):
        LPEq(ParamStore(), "p", 1, lam=1.0, gam=-2.0)


# NW-PEq

def test_nwpeq_zero_beta_is_lpeq():
    x = RNG.normal(size=(2, 4, 2))
    lam, gam = np.array([1.5, 0.7]), np.array([0.3, -0.2])
    a = nwpeq_softmax(x, lam, gam, np.zeros(2))
    b = lpeq(x, lam, gam)
    assert np.allclose(a.output.data, b.output.data, atol=1e-14)
    assert np.allclose(a.logdet.data, b.logdet.data, atol=1e-14)


def test_nwpeq_large_beta_shifts_by_max():
    x = np.array([0.0, 1.0, 2.0]).reshape(1, 3, 1)
    y, _ = nwpeq_softmax(x, np.array([1.0]), np.array([1.0]), np.array([50.0]))
    assert np.abs(y.data - (x + 2.0)).max() <= 1e-3


def test_nwpeq_logdet_equals_linear_case():
    x = RNG.normal(size=(2, 4, 2))
    lam, gam = np.array([1.2, 0.8]), np.array([0.5, 0.1])
    assert np.allclose(nwpeq_softmax(x, lam, gam, np.array([3.0, -2.0])).logdet.data,
                       lpeq(x, lam, gam).logdet.data)


def test_nwpeq_round_trip_and_jacobian():
    t = NWPEq(ParamStore(), "nw", 2, lam=1.3, gam=0.4, beta=1.5)
    x = RNG.normal(size=(4, 2))
    assert round_trip_error(t, x[None]) <= 1e-8
    assert oracle.relative_error(analytic_logdet(t, x), oracle.fd_jacobian_logdet(as_fn(t), x), floor=1.0) <= 1e-4


# set embedding and set coupling

def test_embedding_single_point_is_feature_map():
    emb = SetEmbedding(ParamStore(), "e", 2, RNG, width=4, hidden=8)
    x = RNG.normal(size=(3, 1, 2))
    direct = emb.set_net(emb.point_net(Tensor(x[:, 0])))
    assert np.allclose(emb(x).data, direct.data, atol=1e-15)


def test_embedding_is_permutation_invariant():
    emb = SetEmbedding(ParamStore(), "e", 2, RNG, width=4, hidden=8)
    x = RNG.normal(size=(2, 6, 2))
    assert np.abs(emb(x[:, RNG.permutation(6)]).data - emb(x).data).max() <= 1e-10


def test_embedding_unchanged_by_duplication():
    emb = SetEmbedding(ParamStore(), "e", 2, RNG, width=4, hidden=8)
    x = RNG.normal(size=(2, 5, 2))
    assert np.abs(emb(np.concatenate([x, x], axis=1)).data - emb(x).data).max() <= 1e-12


def test_set_coupling_zero_nets_is_identity():
    t = SetCoupling(ParamStore(), "s", DimensionMask(3, (0, 2)), RNG, hidden=(8, 8), width=4)
    t.net.zero_output()
    x = RNG.normal(size=(2, 4, 3))
    y, ld = t(x)
    assert np.array_equal(y.data, x)
    assert np.array_equal(ld.data, [0.0, 0.0])


def test_set_coupling_equivariance():
    t = build_transform("setcoupling", 3, RNG)
    x = RNG.normal(size=(1, 5, 3))
    with no_grad():
        y, ld = t(x)
        for _ in range(20):
            p = RNG.permutation(5)
            yp, ldp = t(x[:, p])
            assert np.abs(yp.data - y.data[:, p]).max() <= 1e-9
            assert abs(ldp.data[0] - ld.data[0]) <= 1e-9


def test_set_coupling_full_jacobian():
    store = ParamStore()
    t = SetCoupling(store, "s", DimensionMask(3, (0, 2)), RNG, hidden=(16, 16), width=8)
    perturb(store, RNG, 0.3)
    x = RNG.normal(size=(4, 3))
    assert oracle.relative_error(analytic_logdet(t, x), oracle.fd_jacobian_logdet(as_fn(t), x), floor=1.0) <= 1e-4
    assert round_trip_error(t, x[None]) <= 1e-8


# compose

def test_empty_stack_is_identity():
    x = RNG.normal(size=(2, 3, 2))
    y, ld = compose([], x)
    assert np.array_equal(y.data, x)
    assert np.array_equal(ld.data, [0.0, 0.0])


def test_composed_logdet_is_sum():
    store = ParamStore()
    a = LPEq(store, "a", 2, lam=1.5, gam=0.2)
    b = LeakyReLUFlow(store, "b", 0.4)
    x = RNG.normal(size=(3, 4, 2))
    with no_grad():
        y1, l1 = a(x)
        _, l2 = b(y1)
        _, total = compose([a, b], x)
    assert np.allclose(total.data, l1.data + l2.data, atol=1e-14)


def test_compose_reports_failing_index():
    store = ParamStore()
    stack = [LeakyReLUFlow(store, "a", 0.5), PointwiseCoupling(store, "b", DimensionMask(2, (0,)), RNG)]
    with pytest.raises(Exception, match=r"stack\[1\]"):
        compose(stack, RNG.normal(size=(1, 2, 3)))


def test_six_layer_stack_round_trip():
    from flowscan.verify import random_stack
    stack = random_stack(RNG, 3)
    x = RNG.normal(size=(2, 5, 3))
    with no_grad():
        y, ld = compose(stack, x)
        back, ld_inv = compose(stack, y, "inverse")
    assert np.abs(back.data - x).max() <= 1e-8
    assert np.allclose(ld.data, -ld_inv.data, atol=1e-10)


# properties over random transforms

@settings(max_examples=25, deadline=None)
@given(st.sampled_from(EQUIVARIANT_KINDS), st.integers(2, 3), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_equivariance_property(kind, d, n, seed):
    rng = np.random.default_rng(seed)
    t = build_transform(kind, d, rng, mask_index=seed % 2)
    x = rng.normal(size=(2, n, d))
    p = rng.permutation(n)
    with no_grad():
        y, ld = t(x)
        yp, ldp = t(x[:, p])
    assert np.abs(yp.data - y.data[:, p]).max() <= 1e-9
    assert np.abs(ldp.data - ld.data).max() <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(EQUIVARIANT_KINDS), st.integers(2, 3), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_jacobian_property(kind, d, n, seed):
    rng = np.random.default_rng(seed)
    t = build_transform(kind, d, rng, mask_index=seed % 2)
    x = rng.normal(size=(n, d))
    assert oracle.relative_error(analytic_logdet(t, x), oracle.fd_jacobian_logdet(as_fn(t), x), floor=1.0) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(EQUIVARIANT_KINDS), st.integers(2, 3), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_invertibility_property(kind, d, n, seed):
    rng = np.random.default_rng(seed)
    t = build_transform(kind, d, rng, mask_index=seed % 2)
    assert round_trip_error(t, rng.normal(size=(2, n, d))) <= 1e-8
