"""Feed-forward Bayesian network: architecture, parameters, and forward passes.

Parameters live in a flat dict of arrays (or tape Vars) keyed by
``W{l}_mean``, ``W{l}_logvar``, ``b{l}_mean``, ``b{l}_logvar`` and, for the
homoscedastic head, ``log_noise``.  Layer ``l`` maps width
``layer_sizes[l]`` to ``layer_sizes[l + 1]``; a skip layer computes
``a + f(a) W + b`` instead of ``f(a) W + b``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from detvi import gaussmoments as gm
from detvi import gradcore as G
from detvi import heads, specials
from detvi.gradcore import value

HETERO = "hetero"
HOMO = "homo"
CLASSIFICATION = "classification"
HEADS = (HETERO, HOMO, CLASSIFICATION)

INIT_VAR_SCALE = 1e-3


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple
    nonlinearity: str = gm.RELU
    head: str = HETERO
    cov_mode: str = gm.FULL
    skip_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "skip_layers", frozenset(int(i) for i in self.skip_layers))
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must list at least two positive widths, got {sizes}")
        if self.nonlinearity not in gm.KINDS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.cov_mode not in gm.MODES:
            raise ValueError(f"unknown cov_mode {self.cov_mode!r}")
        if self.head == HETERO and sizes[-1] != 2:
            raise ValueError("heteroscedastic head needs output width 2 (mean, log-variance)")
        if self.head == HOMO and sizes[-1] != 1:
            raise ValueError("homoscedastic head needs output width 1")
        if self.head == CLASSIFICATION and sizes[-1] < 2:
            raise ValueError("classification head needs at least 2 outputs")
        for i in self.skip_layers:
            if not 1 <= i < self.n_layers:
                raise ValueError(f"skip layer {i} out of range 1..{self.n_layers - 1}")
            if sizes[i] != sizes[i + 1]:
                raise ValueError(f"skip layer {i} is not square ({sizes[i]}x{sizes[i + 1]})")

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self):
        return [(self.layer_sizes[i], self.layer_sizes[i + 1]) for i in range(self.n_layers)]

    def to_dict(self):
        return dict(
            layer_sizes=list(self.layer_sizes),
            nonlinearity=self.nonlinearity,
            head=self.head,
            cov_mode=self.cov_mode,
            skip_layers=sorted(self.skip_layers),
        )


def param_names(spec):
    names = []
    for i in range(spec.n_layers):
        names += [f"W{i}_mean", f"W{i}_logvar", f"b{i}_mean", f"b{i}_logvar"]
    if spec.head == HOMO:
        names.append("log_noise")
    return names


def init_params(spec, seed):
    """He-scaled weight means with small initial variances."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, (n_in, n_out) in enumerate(spec.layer_shapes):
        scale = 2.0 / n_in
        params[f"W{i}_mean"] = rng.normal(0.0, math.sqrt(scale), size=(n_in, n_out))
        params[f"W{i}_logvar"] = np.full((n_in, n_out), math.log(INIT_VAR_SCALE * scale))
        params[f"b{i}_mean"] = np.zeros(n_out)
        params[f"b{i}_logvar"] = np.full(n_out, math.log(INIT_VAR_SCALE))
    if spec.head == HOMO:
        params["log_noise"] = np.zeros(())
    return params


def layers_from(params, spec):
    return [
        gm.LayerParams(params[f"W{i}_mean"], params[f"W{i}_logvar"], params[f"b{i}_mean"], params[f"b{i}_logvar"])
        for i in range(spec.n_layers)
    ]


# --------------------------------------------------------------------------
# deterministic moment propagation


def forward_moments(spec, params, x, mode=None):
    """Gaussian approximation to the output activations for inputs x ``(B, d_x)``."""
    mode = spec.cov_mode if mode is None else mode
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"inputs must have shape (B, {spec.layer_sizes[0]}), got {x.shape}")
    layers = layers_from(params, spec)
    act = gm.input_layer(x, layers[0])
    for i in range(1, spec.n_layers):
        if i in spec.skip_layers:
            act = gm.propagate_skip(act, spec.nonlinearity, layers[i])
            if mode == gm.DIAGONAL:
                act = gm.GaussianActivation(act.mean, G.diagonal(act.cov), diagonal=True)
        else:
            act = gm.propagate_layer(act, spec.nonlinearity, layers[i], mode)
    return act


def regression_moments(spec, params, x, mode=None):
    """Output moments for a regression head.

    Heteroscedastic: RegressionOutputMoments.  Homoscedastic: ``(mean, var)``
    of the single output unit.
    """
    act = forward_moments(spec, params, x, mode)
    if spec.head == HETERO:
        return heads.RegressionOutputMoments.from_activation(act)
    if spec.head == HOMO:
        return act.mean[..., 0], act.variances()[..., 0]
    raise ValueError("regression_moments needs a regression head")


def dvi_log_likelihood(spec, params, x, y, mode=None):
    """Closed-form expected log-likelihood per datum, shape ``(B,)``."""
    if spec.head == CLASSIFICATION:
        act = forward_moments(spec, params, x, mode)
        cov = act.full_cov()
        terms = [
            heads.classification_ell(heads.ClassOutputMoments(act.mean[n], cov[n]), int(label))
            for n, label in enumerate(np.asarray(y))
        ]
        return G.concat([G.reshape(t, (1,)) for t in terms], axis=0)
    y = np.asarray(y, dtype=np.float64)
    if spec.head == HETERO:
        return heads.regression_ell(regression_moments(spec, params, x, mode), y)
    m_mean, s_mm = regression_moments(spec, params, x, mode)
    return heads.regression_ell_homoscedastic(m_mean, s_mm, params["log_noise"], y)


def predictive(spec, params, x, mode=None):
    """Gaussian predictive ``(mean, var)`` arrays for a regression head."""
    if spec.head == HETERO:
        return heads.predictive_regression(regression_moments(spec, params, x, mode))
    if spec.head == HOMO:
        m_mean, s_mm = regression_moments(spec, params, x, mode)
        return value(m_mean), value(s_mm) + math.exp(float(value(params["log_noise"])))
    raise ValueError("predictive needs a regression head")


# --------------------------------------------------------------------------
# sampled forward passes


def activation(a, kind):
    if kind == gm.RELU:
        return G.relu(a)
    return (value(a) > 0).astype(np.float64)


def sampled_forward(spec, weights, biases, x):
    """Deterministic forward pass with concrete weights.

    ``weights[l]`` has shape ``(S, n_in, n_out)`` and ``biases[l]`` shape
    ``(S, 1, n_out)``; the result has shape ``(S, B, n_out)``.
    """
    a = G.matmul(np.asarray(x, dtype=np.float64), weights[0]) + biases[0]
    for i in range(1, spec.n_layers):
        delta = G.matmul(activation(a, spec.nonlinearity), weights[i]) + biases[i]
        a = a + delta if i in spec.skip_layers else delta
    return a


def output_log_likelihood(spec, params, out, y):
    """log p(y | output activations) for outputs ``(..., B, K)``; returns ``(..., B)``."""
    if spec.head == HETERO:
        m, ell = out[..., 0], out[..., 1]
        return -0.5 * (specials.LOG2PI + ell + G.square(m - y) / G.exp(ell))
    if spec.head == HOMO:
        log_noise = params["log_noise"]
        return -0.5 * (specials.LOG2PI + log_noise + G.square(out[..., 0] - y) / G.exp(log_noise))
    labels = np.asarray(y, dtype=np.int64)
    onehot = np.eye(spec.layer_sizes[-1])[labels]
    return G.sum(out * onehot, axis=-1) - G.logsumexp(out, axis=-1)
