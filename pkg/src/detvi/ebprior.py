"""KL divergences and the empirical-Bayes update of hierarchical prior variances.

Each partition of weights shares one prior variance ``s`` with an
inverse-gamma hyperprior.  The variance minimizing KL[q || N(0, s I)] - log p(s)
has a closed form, so it is recomputed from the current variational
parameters and plugged in as a constant.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from detvi import gradcore as G
from detvi.gradcore import value

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 10.0


def kl_diag_gaussian(q_mean, q_var, p_mean, p_var):
    """KL[N(q_mean, diag q_var) || N(p_mean, diag p_var)]; arguments broadcast."""
    if np.any(value(q_var) <= 0) or np.any(value(p_var) <= 0):
        raise ValueError("variances must be positive")
    ratio = q_var / p_var
    terms = -G.log(ratio) - 1.0 + ratio + G.square(p_mean - q_mean) / p_var
    return 0.5 * G.sum(terms)


def kl_to_isotropic(q_mean, q_logvar, s):
    """KL[q || N(0, s I)] with q parameterized by log-variance; ``s`` is a constant."""
    q_var = G.exp(q_logvar)
    terms = math.log(s) - q_logvar - 1.0 + (q_var + G.square(q_mean)) / s
    return 0.5 * G.sum(terms)


def eb_optimal_s(trace_stat, omega, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """s* = (trace_stat + 2 beta) / (omega + 2 alpha + 2)."""
    if trace_stat < 0 or omega < 0:
        raise ValueError("trace_stat and omega must be non-negative")
    return (trace_stat + 2.0 * beta) / (omega + 2.0 * alpha + 2.0)


def log_inverse_gamma(s, alpha, beta):
    return alpha * math.log(beta) - math.lgamma(alpha) - (alpha + 1.0) * math.log(s) - beta / s


def eb_objective(s, q_mean, q_var, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """KL[q || N(0, s I)] - log InvGamma(s | alpha, beta)."""
    if s <= 0:
        raise ValueError("prior variance must be positive")
    q_mean = np.asarray(q_mean, dtype=np.float64)
    q_var = np.asarray(q_var, dtype=np.float64)
    kl = float(kl_diag_gaussian(q_mean, q_var, 0.0, s))
    return kl - log_inverse_gamma(s, alpha, beta)


@dataclass(frozen=True)
class PartitionState:
    members: tuple
    alpha: float
    beta: float
    omega: int
    s_star: float


@dataclass(frozen=True)
class HierarchicalPrior:
    partitions: tuple

    def s_of(self, member):
        for part in self.partitions:
            if member in part.members:
                return part.s_star
        raise KeyError(member)


def weight_key(layer_index):
    return f"W{layer_index}"


def hierarchical_prior_for(layer_shapes, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """One partition per weight matrix, initialized at the hyperprior mode."""
    parts = []
    for i, (n_in, n_out) in enumerate(layer_shapes):
        omega = int(n_in * n_out)
        parts.append(PartitionState((weight_key(i),), alpha, beta, omega, eb_optimal_s(0.0, 0, alpha, beta)))
    return HierarchicalPrior(tuple(parts))


def _member_blocks(member, layers):
    if not member.startswith("W"):
        raise ValueError(f"unknown partition member {member!r}")
    idx = int(member[1:])
    if not 0 <= idx < len(layers):
        raise ValueError(f"partition member {member!r} has no matching layer")
    layer = layers[idx]
    return value(layer.weight_mean), np.exp(value(layer.weight_logvar))


def eb_update(prior, layers):
    """Recompute s* of every partition from the current variational parameters.

    ``layers`` is a sequence of LayerParams (values or Vars); nothing is
    differentiated through the update.
    """
    parts = []
    for part in prior.partitions:
        trace, omega = 0.0, 0
        for member in part.members:
            mean, var = _member_blocks(member, layers)
            trace += float(np.sum(var) + np.sum(mean * mean))
            omega += mean.size
        if omega != part.omega:
            raise ValueError(f"partition {part.members} expects {part.omega} weights, layers give {omega}")
        parts.append(dataclasses.replace(part, s_star=eb_optimal_s(trace, omega, part.alpha, part.beta)))
    return HierarchicalPrior(tuple(parts))
