import math

import numpy as np
import pytest

from detvi import gaussmoments as gm
from detvi import gradcore as G
from detvi import mcvi, network


def net(seed=0, sizes=(2, 6, 2), kind=gm.RELU, head=network.HETERO, inflate=20.0):
    spec = network.NetworkSpec(sizes, kind, head)
    params = network.init_params(spec, seed)
    for k in params:
        if k.endswith("logvar"):
            params[k] = params[k] + math.log(inflate)
    return spec, params


def data(n=5, d=2, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.normal(size=n)


def freeze(params):
    out = dict(params)
    for k in out:
        if k.endswith("logvar"):
            out[k] = np.full_like(out[k], -800.0)
    return out


@pytest.mark.parametrize("mode", mcvi.MC_MODES)
def test_zero_variance_equals_deterministic_network(mode):
    spec, params = net()
    params = freeze(params)
    x, y = data()
    h = np.maximum(x @ params["W0_mean"] + params["b0_mean"], 0)
    out = h @ params["W1_mean"] + params["b1_mean"]
    det = float(np.sum(network.output_log_likelihood(spec, params, out, y)))
    for s in (1, 7):
        est = mcvi.mc_reconstruction(spec, params, x, y, mcvi.MCVIConfig(s, 3, mode))
        assert est == pytest.approx(det, rel=1e-13)


@pytest.mark.parametrize("mode", mcvi.MC_MODES)
def test_fixed_seed_is_bitwise_repeatable(mode):
    spec, params = net()
    x, y = data()
    cfg = mcvi.MCVIConfig(4, 11, mode)
    a = mcvi.mc_reconstruction(spec, params, x, y, cfg, step=5)
    b = mcvi.mc_reconstruction(spec, params, x, y, cfg, step=5)
    assert a == b
    assert a != mcvi.mc_reconstruction(spec, params, x, y, cfg, step=6)


def test_keyed_noise_is_order_independent():
    a = mcvi.keyed_normal(1, 2, 3, 4, (5,))
    mcvi.keyed_normal(9, 9, 9, 9, (100,))
    b = mcvi.keyed_normal(1, 2, 3, 4, (5,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, mcvi.keyed_normal(1, 2, 4, 4, (5,)))


def test_config_validation():
    with pytest.raises(ValueError):
        mcvi.MCVIConfig(0)
    with pytest.raises(ValueError):
        mcvi.MCVIConfig(1, 0, "bogus")
    spec, params = net()
    with pytest.raises(ValueError):
        mcvi.local_reparam_forward(spec, params, *data(), mcvi.MCVIConfig(1, 0, mcvi.WEIGHT_SAMPLING))


def per_sample(spec, params, x, y, cfg):
    weights, biases = mcvi.sample_weights(spec, params, cfg)
    out = network.sampled_forward(spec, weights, biases, x)
    return np.sum(network.output_log_likelihood(spec, params, out, y), axis=-1)


def test_large_sample_estimate_agrees_with_closed_form():
    spec, params = net(sizes=(2, 8, 2), inflate=5.0)
    x, y = data(n=3)
    cfg = mcvi.MCVIConfig(20000, 5)
    vals = per_sample(spec, params, x, y, cfg)
    est = mcvi.mc_reconstruction(spec, params, x, y, cfg)
    assert est == pytest.approx(vals.mean(), rel=1e-12)
    closed = float(np.sum(network.dvi_log_likelihood(spec, params, x, y)))
    assert abs(est - closed) < 3 * vals.std(ddof=1) / math.sqrt(len(vals))


def test_local_reparam_has_same_expectation():
    spec, params = net(sizes=(2, 5, 2), inflate=5.0)
    x, y = data(n=2)
    n = 1500
    local = np.array(
        [mcvi.mc_reconstruction(spec, params, x, y, mcvi.MCVIConfig(1, s, mcvi.LOCAL_REPARAM)) for s in range(n)]
    )
    weight = np.array([mcvi.mc_reconstruction(spec, params, x, y, mcvi.MCVIConfig(1, s)) for s in range(n)])
    se = math.sqrt(local.var(ddof=1) / n + weight.var(ddof=1) / n)
    assert abs(local.mean() - weight.mean()) < 3 * se


def test_mc_gradients_match_finite_differences_with_frozen_noise():
    spec, params = net(sizes=(2, 4, 2), inflate=50.0)
    x, y = data(n=4)
    for mode in mcvi.MC_MODES:
        cfg = mcvi.MCVIConfig(3, 2, mode)
        err = G.finite_diff_check(lambda p, cfg=cfg: mcvi.mc_reconstruction(spec, p, x, y, cfg), params)
        assert err <= 1e-4


def test_homoscedastic_and_classification_heads():
    spec, params = net(sizes=(2, 4, 1), head=network.HOMO)
    x, y = data()
    params = freeze(params)
    params["log_noise"] = np.array(0.3)
    est = mcvi.mc_reconstruction(spec, params, x, y, mcvi.MCVIConfig(2))
    m = np.maximum(x @ params["W0_mean"] + params["b0_mean"], 0) @ params["W1_mean"] + params["b1_mean"]
    exact = np.sum(-0.5 * (math.log(2 * math.pi) + 0.3 + (m[:, 0] - y) ** 2 / math.exp(0.3)))
    assert est == pytest.approx(exact, rel=1e-12)
    spec, params = net(sizes=(2, 4, 3), head=network.CLASSIFICATION)
    labels = np.array([0, 2, 1, 1, 0])
    est = mcvi.mc_reconstruction(spec, params, x, labels, mcvi.MCVIConfig(3))
    assert est < 0


def test_probe_is_zero_without_sampling_noise():
    spec, params = net()
    x, y = data()
    assert mcvi.grad_variance_probe(spec, params, x, y, None, repeats=3) == 0.0
    frozen = freeze(params)
    assert mcvi.grad_variance_probe(spec, frozen, x, y, mcvi.MCVIConfig(2), repeats=3) == 0.0
    assert mcvi.grad_variance_probe(spec, params, x, y, mcvi.MCVIConfig(2), repeats=3) > 0
    with pytest.raises(ValueError):
        mcvi.grad_variance_probe(spec, params, x, y, None, repeats=1)


def test_heaviside_sampling_runs():
    spec, params = net(kind=gm.HEAVISIDE)
    x, y = data()
    for mode in mcvi.MC_MODES:
        value, grads = G.value_and_grad(lambda p: mcvi.mc_reconstruction(spec, p, x, y, mcvi.MCVIConfig(2, 0, mode)), params)
        assert math.isfinite(value)
        # the step function passes no gradient to the first layer
        np.testing.assert_array_equal(grads["W0_mean"], 0.0)
