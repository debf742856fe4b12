"""Scalar special functions used by the moment and likelihood formulas.

All functions accept scalars or numpy arrays and evaluate elementwise in
float64.  The normal CDF goes through the complementary error function so
that tail values keep their relative accuracy.
"""

import math

import numpy as np
from scipy import special

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
LOG2PI = math.log(2.0 * math.pi)
SQRT_PI_OVER_2 = math.sqrt(math.pi / 2.0)

# Below this, erfc(-x/sqrt2) underflows before exp(-x^2/2) does.
_CDF_TAIL = -5.0


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / SQRT2PI


def std_normal_cdf(x):
    """Phi(x), strictly positive for every finite x."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * special.erfc(-x / SQRT2)
    tail = x < _CDF_TAIL
    if np.any(tail):
        # erfcx(t) = exp(t^2) erfc(t) keeps the mantissa when erfc underflows.
        xt = x[tail]
        out = np.array(out)
        out[tail] = 0.5 * special.erfcx(-xt / SQRT2) * np.exp(-0.5 * xt * xt)
    return out


def soft_relu(x):
    """SR(x) = phi(x) + x Phi(x), the mean of max(0, z) for z ~ N(x, 1).

    For negative x the two terms nearly cancel, so we use the Mills ratio
    form phi(x) * (1 - t * R(t)) with t = -x and R(t) = sqrt(pi/2) erfcx(t/sqrt2).
    """
    x = np.asarray(x, dtype=np.float64)
    neg = x < 0.0
    t = np.where(neg, -x, 0.0)
    left = std_normal_pdf(x) * (1.0 - t * SQRT_PI_OVER_2 * special.erfcx(t / SQRT2))
    right = std_normal_pdf(x) + x * std_normal_cdf(x)
    return np.where(neg, left, right)


def log_sum_exp(v, axis=-1, keepdims=False):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    vmax = np.max(v, axis=axis, keepdims=True)
    out = vmax + np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)
