"""ELBO assembly, Adam, and the minibatch training loop.

The optimized loss is the negative ELBO divided by the training-set size,
so learning rates behave the same across datasets.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from detvi import ebprior
from detvi import gaussmoments as gm
from detvi import gradcore as G
from detvi import heads, mcvi, network
from detvi.network import CLASSIFICATION, HETERO, HOMO, NetworkSpec, init_params  # noqa: F401

DVI = "dvi"
DDVI = "ddvi"
MCVI = "mcvi"
INFERENCE = (DVI, DDVI, MCVI)

EB = "eb"
FIXED = "fixed"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BIAS_PRIOR_VAR = 1.0


class NumericalDivergence(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 1000
    seed: int = 0
    inference: str = DVI
    mc_samples: int = 10
    mc_mode: str = mcvi.WEIGHT_SAMPLING
    prior: str = EB
    prior_alpha: float = ebprior.DEFAULT_ALPHA
    prior_beta: float = ebprior.DEFAULT_BETA
    prior_variance: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.inference not in INFERENCE:
            raise ValueError(f"inference must be one of {INFERENCE}")
        if self.prior not in (EB, FIXED):
            raise ValueError("prior must be 'eb' or 'fixed'")
        if self.prior == EB and not (self.prior_alpha > 0 and self.prior_beta > 0):
            raise ValueError("prior_alpha and prior_beta must be positive")
        if self.prior == FIXED and not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.mc_mode not in mcvi.MC_MODES:
            raise ValueError(f"mc_mode must be one of {mcvi.MC_MODES}")

    def mc_config(self):
        return mcvi.MCVIConfig(self.mc_samples, self.seed, self.mc_mode)

    def cov_mode(self, spec):
        return gm.DIAGONAL if self.inference == DDVI else spec.cov_mode


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    @property
    def final_test_ll(self):
        for rec in reversed(self.records):
            if rec["test_ll"] is not None:
                return rec["test_ll"]
        return None

    def curve(self, key):
        return np.array([rec[key] for rec in self.records], dtype=np.float64)


def make_prior(spec, cfg):
    """Initial prior state: a HierarchicalPrior for EB, the variance for a fixed prior."""
    if cfg.prior == EB:
        return ebprior.hierarchical_prior_for(spec.layer_shapes, cfg.prior_alpha, cfg.prior_beta)
    return float(cfg.prior_variance)


def kl_term(spec, params, prior):
    """Penalty subtracted from the reconstruction term.

    Fixed prior: the KL divergences.  EB: variances are refreshed from
    ``params`` and held constant, and the penalty is
    KL[q || N(0, s*)] - log p(s*).  Because s* minimizes that expression,
    the gradient with s* held fixed equals the total derivative.
    """
    layers = network.layers_from(params, spec)
    total = 0.0
    if isinstance(prior, ebprior.HierarchicalPrior):
        prior = ebprior.eb_update(prior, layers)
        weight_vars = [prior.s_of(ebprior.weight_key(i)) for i in range(spec.n_layers)]
        for part in prior.partitions:
            total = total - ebprior.log_inverse_gamma(part.s_star, part.alpha, part.beta)
    else:
        weight_vars = [float(prior)] * spec.n_layers
    for layer, s in zip(layers, weight_vars):
        total = total + ebprior.kl_to_isotropic(layer.weight_mean, layer.weight_logvar, s)
        total = total + ebprior.kl_to_isotropic(layer.bias_mean, layer.bias_logvar, BIAS_PRIOR_VAR)
    return total


def reconstruction(spec, params, x, y, cfg, step=0):
    """Summed expected log-likelihood of a batch (closed form or sampled)."""
    if cfg.inference == MCVI:
        return mcvi.mc_reconstruction(spec, params, x, y, cfg.mc_config(), step)
    return G.sum(network.dvi_log_likelihood(spec, params, x, y, cfg.cov_mode(spec)))


def assemble_elbo(spec, params, prior, x, y, dataset_size, cfg, step=0):
    """(N/B) * batch reconstruction - prior penalty (see :func:`kl_term`)."""
    batch = np.asarray(x).shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    recon = reconstruction(spec, params, x, y, cfg, step)
    return (float(dataset_size) / batch) * recon - kl_term(spec, params, prior)


def adam_init(params):
    return dict(
        t=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update (descending ``grads``); returns new (params, state)."""
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for k, p in params.items():
        g = grads[k]
        m = ADAM_BETA1 * state["m"][k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state["v"][k] + (1.0 - ADAM_BETA2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_params, dict(t=t, m=new_m, v=new_v)


def evaluate_test_ll(spec, params, test_set, mode=None):
    """Average Gaussian predictive log-density of the test targets, in original units."""
    mean, var = network.predictive(spec, params, test_set.features, mode)
    ll = heads.gaussian_log_density(test_set.targets, mean, var)
    return float(np.mean(ll)) - math.log(test_set.target_std)


def _norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def train(spec, train_set, test_set, cfg, params=None, on_epoch=None):
    """Minimize -ELBO/N with minibatch Adam.

    Returns (params, RunMetrics).  ``on_epoch(record)`` is called after each
    epoch.  The test set may be None, in which case ``test_ll`` is None.
    """
    x_all = np.asarray(train_set.features, dtype=np.float64)
    y_all = np.asarray(train_set.targets)
    n = x_all.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    params = init_params(spec, cfg.seed) if params is None else {k: np.array(v) for k, v in params.items()}
    prior = make_prior(spec, cfg)
    state = adam_init(params)
    metrics = RunMetrics()
    order_rng = np.random.default_rng([cfg.seed & ((1 << 64) - 1), 1])
    batch = min(cfg.batch_size, n)
    eval_mode = spec.cov_mode if cfg.inference == MCVI else cfg.cov_mode(spec)
    step = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        elbos = []
        for b, lo in enumerate(range(0, n, batch)):
            idx = perm[lo : lo + batch]
            xb, yb = x_all[idx], y_all[idx]

            def loss(p, xb=xb, yb=yb, step=step):
                return -assemble_elbo(spec, p, prior, xb, yb, n, cfg, step) / n

            value, grads = G.value_and_grad(loss, params)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                norms = ", ".join(f"{k}={v:.3g}" for k, v in _norms(params).items())
                raise NumericalDivergence(
                    f"non-finite loss {value!r} at epoch {epoch}, batch {b} (step {step}); parameter norms: {norms}"
                )
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            elbos.append(-value)
            step += 1
        test_ll = evaluate_test_ll(spec, params, test_set, eval_mode) if test_set is not None else None
        rec = dict(
            epoch=epoch,
            train_elbo=float(np.mean(elbos)),
            test_ll=test_ll,
            wall_time=time.perf_counter() - start,
        )
        metrics.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, metrics
