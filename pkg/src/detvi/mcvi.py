"""Monte Carlo estimates of the expected log-likelihood, for comparison with DVI.

Noise is drawn from a counter-based generator keyed by
``(seed, step, sample, layer)``, so an estimate depends only on its key and
not on evaluation order.
"""

from dataclasses import dataclass

import numpy as np

from detvi import gradcore as G
from detvi import network

WEIGHT_SAMPLING = "weight"
LOCAL_REPARAM = "local"
MC_MODES = (WEIGHT_SAMPLING, LOCAL_REPARAM)

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class MCVIConfig:
    samples: int = 10
    rng_seed: int = 0
    mode: str = WEIGHT_SAMPLING

    def __post_init__(self):
        if int(self.samples) < 1:
            raise ValueError("samples must be at least 1")
        if self.mode not in MC_MODES:
            raise ValueError(f"unknown MC mode {self.mode!r}")


def keyed_normal(seed, step, sample, layer, shape):
    """Standard normal draws determined by the key alone (Philox stream)."""
    key = np.random.SeedSequence([int(seed) & _U64, int(step) & _U64, int(sample), int(layer)])
    return np.random.Generator(np.random.Philox(key)).standard_normal(shape)


def _noise(cfg, step, layer, shape):
    return np.stack([keyed_normal(cfg.rng_seed, step, s, layer, shape) for s in range(cfg.samples)])


def sample_weights(spec, params, cfg, step=0):
    """Reparameterized draws ``mean + sigma * eps`` for every layer."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(spec.layer_shapes):
        eps = _noise(cfg, step, 2 * i, (n_in + 1, n_out))
        w_eps, b_eps = eps[:, :n_in, :], eps[:, n_in:, :]
        weights.append(params[f"W{i}_mean"] + G.exp(0.5 * params[f"W{i}_logvar"]) * w_eps)
        biases.append(params[f"b{i}_mean"] + G.exp(0.5 * params[f"b{i}_logvar"]) * b_eps)
    return weights, biases


def _average(spec, params, out, y, samples):
    ll = network.output_log_likelihood(spec, params, out, np.asarray(y))
    return G.sum(ll) / float(samples)


def mc_reconstruction(spec, params, x, y, cfg, step=0):
    """(1/S) sum_s sum_n log p(y_n | x_n, w_s); dispatches on ``cfg.mode``."""
    if cfg.mode == LOCAL_REPARAM:
        return local_reparam_forward(spec, params, x, y, cfg, step)
    weights, biases = sample_weights(spec, params, cfg, step)
    out = network.sampled_forward(spec, weights, biases, x)
    return _average(spec, params, out, y, cfg.samples)


def local_reparam_forward(spec, params, x, y, cfg, step=0):
    """Reconstruction estimate that samples pre-activations instead of weights."""
    if cfg.mode != LOCAL_REPARAM:
        raise ValueError("local_reparam_forward needs mode='local'")
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[0]
    a = None
    for i, (n_in, n_out) in enumerate(spec.layer_shapes):
        h = x if i == 0 else network.activation(a, spec.nonlinearity)
        mean = G.matmul(h, params[f"W{i}_mean"]) + params[f"b{i}_mean"]
        var = G.matmul(G.square(h), G.exp(params[f"W{i}_logvar"])) + G.exp(params[f"b{i}_logvar"])
        eps = _noise(cfg, step, 2 * i, (batch, n_out))
        delta = mean + G.sqrt(var) * eps
        a = a + delta if i in spec.skip_layers else delta
    return _average(spec, params, a, y, cfg.samples)


def grad_variance_probe(spec, params, x, y, cfg, repeats, step_offset=0):
    """Mean over final-layer weight log-variances of the across-repeat gradient variance.

    ``cfg=None`` probes the deterministic closed-form objective instead.
    """
    if repeats < 2:
        raise ValueError("repeats must be at least 2")
    target = f"W{spec.n_layers - 1}_logvar"
    grads = []
    for r in range(repeats):
        if cfg is None:

            def loss(p):
                return G.sum(network.dvi_log_likelihood(spec, p, x, y))

        else:

            def loss(p, r=r):
                return mc_reconstruction(spec, p, x, y, cfg, step=step_offset + r)

        _, g = G.value_and_grad(loss, params)
        grads.append(g[target].ravel())
    stacked = np.stack(grads)
    # shifting by the first repeat makes identical gradients give exactly zero variance
    return float(np.mean(np.var(stacked - stacked[0], axis=0, ddof=1)))
