import math

import numpy as np
import pytest

from flowscan.core import no_grad
from flowscan.errors import ConfigError, SchemaError
from flowscan.model import ABLATIONS, FlowScan, FlowScanConfig, evaluate_ppll
from flowscan.verify import (check_exchangeability, check_model_gradient, miniature_config,
                             model_normalization, perturb, random_configs)

RNG = np.random.default_rng(21)


def small_config(**kw):
    base = dict(d=2, n=4, hidden=8, layers=1, components=3, mix_hidden=8, coupling_hidden=8,
                embed_width=4, rec_hidden=4)
    base.update(kw)
    return FlowScanConfig(**base)


def standard_normal_scan_model(n=2, d=1):
    """Empty stacks, no order map, and an AR base with zero weights: a sorted
    scan scored by i.i.d. standard normals."""
    model = FlowScan(FlowScanConfig(d=d, n=n, equivariant=(), correspondence=0, order_map=False,
                                    components=1, hidden=4, layers=1, mix_hidden=4))
    for p in model.store:
        p.data[...] = 0.0
    return model


def test_analytic_composition_example():
    model = standard_normal_scan_model()
    x = np.zeros((1, 2, 1))
    expected = -math.log(2) - math.log(2 * math.pi)
    assert model.log_prob(x).data[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-2.53102, abs=1e-5)
    assert model.ppll(x).data[0] == pytest.approx(-1.26551, abs=1e-5)


def test_single_point_ppll_is_log_prob():
    model = FlowScan(small_config(n=None))
    x = RNG.normal(size=(3, 1, 2))
    assert np.array_equal(model.ppll(x).data, model.log_prob(x).data)


def test_batch_mean_matches_per_set_mean():
    model = FlowScan(small_config())
    x = RNG.normal(size=(6, 4, 2))
    batch = model.ppll(x).data.mean()
    single = np.mean([model.ppll(x[i:i + 1]).data[0] for i in range(6)])
    assert batch == pytest.approx(single, abs=1e-12)


def test_full_model_is_exchangeable():
    model = FlowScan(small_config(recurrent=1))
    perturb(model.store, RNG, 0.3)
    x = RNG.normal(size=(1, 5, 2))
    ref = model.log_prob(x).data[0]
    for _ in range(100):
        assert abs(model.log_prob(x[:, RNG.permutation(5)]).data[0] - ref) <= 1e-9


def test_random_configs_are_exchangeable():
    ok, detail = check_exchangeability(configs=6, perms=20)
    assert ok, detail


def test_random_configs_cover_every_ablation():
    configs = random_configs(8, seed=0)
    seen = {("flat" if c.flat_base else "eq-off" if c.disable_equivariant
             else "corr-off" if c.disable_correspondence else "full") for c in configs}
    assert seen == {"flat", "eq-off", "corr-off", "full"}


@pytest.mark.parametrize("variant", ABLATIONS)
def test_ablation_variants_are_constructible(variant):
    cfg = small_config().ablation(variant)
    model = FlowScan(cfg)
    lp = model.log_prob(RNG.normal(size=(2, 4, 2))).data
    assert np.all(np.isfinite(lp))


def test_ablation_ladder_is_cumulative():
    cfg = small_config()
    assert cfg.ablation("no-correspondence").correspondence_depth == 0
    eq_off = cfg.ablation("no-equivariant")
    assert eq_off.equivariant_stack == () and eq_off.correspondence_depth == 0
    assert cfg.ablation("flat-base").effective_base == "flat"
    with pytest.raises(ConfigError):
        cfg.ablation("half")


def test_normalization_d1_n2():
    # coarse grid here; the acceptance suite uses 10^6 points
    assert model_normalization(FlowScanConfig(d=1, n=2, init_seed=3), resolution=400) == pytest.approx(1.0, abs=0.02)


def test_gradient_matches_finite_differences():
    ok, detail = check_model_gradient()
    assert ok, detail
    assert 300 <= FlowScan(miniature_config()).num_values() <= 1500


def test_identity_stacks_sample_standard_normals():
    model = standard_normal_scan_model(n=10, d=2)
    x = model.sample(10, seed=0, count=1000).reshape(-1, 2)
    assert np.abs(np.cov(x.T) - np.eye(2)).max() <= 0.1
    assert np.abs(x.mean(axis=0)).max() <= 0.05


def test_same_seed_same_samples():
    model = FlowScan(small_config())
    assert np.array_equal(model.sample(4, seed=3, count=2), model.sample(4, seed=3, count=2))
    assert not np.array_equal(model.sample(4, seed=3), model.sample(4, seed=4))


def test_samples_have_positive_density():
    model = FlowScan(small_config())
    perturb(model.store, RNG, 0.2)
    x = model.sample(4, seed=1, count=5)
    assert x.shape == (5, 4, 2)
    assert np.all(np.isfinite(model.log_prob(x).data))


def test_sample_rejects_empty_set():
    with pytest.raises(ConfigError):
        FlowScan(small_config()).sample(0, seed=0)


def test_wrong_dimension_is_schema_error():
    with pytest.raises(SchemaError):
        FlowScan(small_config()).log_prob(np.zeros((1, 4, 3)))


def test_flat_base_needs_its_cardinality():
    model = FlowScan(small_config().ablation("flat-base"))
    with pytest.raises(SchemaError):
        model.log_prob(RNG.normal(size=(1, 5, 2)))


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        FlowScanConfig(d=1, equivariant=("coupling",))
    with pytest.raises(ConfigError):
        FlowScanConfig(d=2, sort_key=2)
    with pytest.raises(ConfigError):
        FlowScanConfig(d=2, correspondence=-1)
    with pytest.raises(ConfigError):
        FlowScanConfig(d=2, flat_base=True)


def test_evaluate_ppll_handles_mixed_cardinality():
    model = FlowScan(small_config(n=None))
    sets = [RNG.normal(size=(k, 2)) for k in (3, 5, 3, 4)]
    got = evaluate_ppll(model, sets, batch_size=2)
    expected = [model.ppll(s[None]).data[0] for s in sets]
    assert np.allclose(got, expected, atol=1e-12)


def test_couplings_keep_the_sort_key_order():
    model = FlowScan(FlowScanConfig(d=2, n=16, sort_key=0, init_seed=3))
    for t in model.equivariant:
        if hasattr(t, "mask"):
            assert 0 not in t.mask.transformed
    x = np.random.default_rng(1).normal(size=(4, 16, 2))
    y = x
    with no_grad():
        for t in model.equivariant:
            y = t(y).output
    y = y.data if hasattr(y, "data") else y
    assert np.array_equal(np.argsort(x[..., 0], axis=1), np.argsort(y[..., 0], axis=1))


def test_key_coupling_can_be_enabled():
    model = FlowScan(FlowScanConfig(d=2, n=4, couple_key=True))
    assert any(0 in t.mask.transformed for t in model.equivariant if hasattr(t, "mask"))
