"""Expected log-likelihoods and predictive distributions from output moments.

Regression reads the final activation pair (m, l) as the mean and log-variance
of a Gaussian observation model.  Classification treats the final
activations as logits and uses second-order Delta expansions.
"""

from dataclasses import dataclass

import numpy as np

from detvi import gradcore as G
from detvi import specials
from detvi.gradcore import value

CLASS_PROB_FLOOR = 1e-12


@dataclass
class RegressionOutputMoments:
    m_mean: object
    l_mean: object
    s_mm: object
    s_ll: object
    s_ml: object

    @classmethod
    def from_activation(cls, act):
        """Split a 2-unit output activation (mean ``(..., 2)``) into (m, l) moments."""
        mean = act.mean
        if act.diagonal:
            s_mm, s_ll = act.cov[..., 0], act.cov[..., 1]
            s_ml = np.zeros(value(mean).shape[:-1])
        else:
            s_mm, s_ll, s_ml = act.cov[..., 0, 0], act.cov[..., 1, 1], act.cov[..., 0, 1]
        return cls(mean[..., 0], mean[..., 1], s_mm, s_ll, s_ml)

    def check(self):
        s_mm, s_ll, s_ml = value(self.s_mm), value(self.s_ll), value(self.s_ml)
        if np.any(s_mm < 0) or np.any(s_ll < 0):
            raise ValueError("output variances must be non-negative")
        if np.any(s_ml**2 > s_mm * s_ll + 1e-12):
            raise ValueError("output covariance is not positive semidefinite")


@dataclass
class ClassOutputMoments:
    logit_mean: object
    logit_cov: object


def regression_ell(mom, y):
    """E[log N(y | m, e^l)] under the Gaussian (m, l) approximation, in closed form."""
    resid = mom.m_mean - mom.s_ml - y
    precision_scale = G.exp(mom.l_mean - 0.5 * mom.s_ll)
    return -0.5 * (specials.LOG2PI + mom.l_mean + (mom.s_mm + G.square(resid)) / precision_scale)


def regression_ell_homoscedastic(m_mean, s_mm, log_noise_var, y):
    """Expected log-likelihood with a single (non-random) log noise variance."""
    resid = m_mean - y
    return -0.5 * (specials.LOG2PI + log_noise_var + (s_mm + G.square(resid)) / G.exp(log_noise_var))


def predictive_regression(mom):
    """Mean and variance of the Gaussian approximation to p(y)."""
    mean = value(mom.m_mean)
    var = value(mom.s_mm) + np.exp(value(mom.l_mean) + 0.5 * value(mom.s_ll))
    return mean, var


def gaussian_log_density(y, mean, var):
    return -0.5 * (specials.LOG2PI + np.log(var) + (y - mean) ** 2 / var)


def _softmax(mean):
    return G.exp(mean - G.reshape(G.logsumexp(mean, axis=-1), value(mean).shape[:-1] + (1,)))


def classification_ell(mom, label):
    """<a_label> - logsumexp(<a>) - (p.diag(Sigma) - p^T Sigma p)/2, p = softmax(<a>)."""
    mean = mom.logit_mean
    k = value(mean).shape[-1]
    label = int(label)
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    if value(mean).ndim != 1:
        raise ValueError("classification_ell takes a single logit vector")
    p = _softmax(mean)
    cov = mom.logit_cov
    p_col = G.reshape(p, (k, 1))
    quad = G.sum(G.matmul(cov, p_col) * p_col)
    spread = G.sum(p * G.diagonal(cov))
    return mean[label] - G.logsumexp(mean) - 0.5 * (spread - quad)


def classification_predictive(mom):
    """Delta-method predictive class probabilities, floored and renormalized."""
    mean = value(mom.logit_mean)
    cov = value(mom.logit_cov)
    p = specials.softmax(mean)
    sp = cov @ p
    diag = np.diagonal(cov)
    out = p * (1.0 + p @ sp - sp + 0.5 * diag - 0.5 * (p @ diag))
    out = np.maximum(out, CLASS_PROB_FLOOR)
    return out / out.sum()
