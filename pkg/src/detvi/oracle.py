"""Brute-force references for the closed-form moments.

Quadrature: the bivariate integral is factored with the lower-triangular
square root of the correlation matrix, ``eta2 | eta1 ~ N(mu2 + rho (eta1 - mu1), 1 - rho^2)``.
Both nonlinearities vanish on the negative half-line, so each 1-D factor is
integrated over its support ``[0, inf)`` truncated at ``span`` standard
deviations, with Gauss-Legendre nodes.  Integrands are smooth there, so the
rule converges to machine precision, which Gauss-Hermite on the
discontinuous integrand would not.

Monte Carlo: weight samples from q pushed through deterministic forward
passes, for end-to-end comparison with moment propagation.
"""

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np

from detvi import gaussmoments as gm
from detvi import network

SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureSpec:
    nodes_per_dim: int = 200
    span: float = 12.0

    def __post_init__(self):
        if self.nodes_per_dim < 50:
            raise ValueError("nodes_per_dim must be at least 50")


DEFAULT_SPEC = QuadratureSpec()


@functools.lru_cache(maxsize=8)
def _legendre(n):
    return np.polynomial.legendre.leggauss(n)


def _support_rule(center, sd, n, span):
    """Nodes and Gaussian-weighted weights for integrating g(x) N(x | center, sd^2) over x > 0.

    ``center`` may be an array; the result then has a trailing node axis.
    """
    center = np.asarray(center, dtype=np.float64)
    t, w = _legendre(n)
    lo = np.maximum(0.0, center - span * sd)
    # the density falls by span^2/2 nats between max(lo, center) and hi, even
    # when the centre sits far below zero and all the mass hugs the boundary
    hi = center + np.sqrt((lo - center) ** 2 + (span * sd) ** 2)
    half = 0.5 * (hi - lo)[..., None]
    x = lo[..., None] + half * (t + 1.0)
    dens = np.exp(-0.5 * ((x - center[..., None]) / sd) ** 2) / (sd * SQRT2PI)
    return x, w * half * dens


def _f(x, kind):
    return np.ones_like(x) if kind == gm.HEAVISIDE else x


def exact_nonlin_moment(mu, sigma2, kind, power=1, spec=DEFAULT_SPEC):
    """E[f(a)^power] for a ~ N(mu, sigma2) by 1-D quadrature."""
    if sigma2 <= 0:
        v = (1.0 if mu > 0 else 0.0) if kind == gm.HEAVISIDE else max(mu, 0.0)
        return v**power
    x, w = _support_rule(mu, math.sqrt(sigma2), spec.nodes_per_dim, spec.span)
    return float(np.sum(w * _f(x, kind) ** power))


def exact_I(mu1, mu2, rho, kind, spec=DEFAULT_SPEC):
    """E[f(eta1) f(eta2)] for unit-variance eta with means (mu1, mu2) and correlation rho."""
    if abs(rho) > 0.999:
        raise ValueError("|rho| must be at most 0.999")
    n = spec.nodes_per_dim
    x1, w1 = _support_rule(mu1, 1.0, n, spec.span)
    rho_bar = math.sqrt(1.0 - rho * rho)
    x2, w2 = _support_rule(mu2 + rho * (x1 - mu1), rho_bar, n, spec.span)
    inner = np.sum(w2 * _f(x2, kind), axis=-1)
    return float(np.sum(w1 * _f(x1, kind) * inner))


def orthant_probability(rho):
    """P(x > 0, y > 0) for a standard bivariate normal pair."""
    return 0.25 + math.asin(rho) / (2.0 * math.pi)


def relu_origin_moment(rho):
    """E[x+ y+] for a standard bivariate normal pair."""
    rho_bar = math.sqrt(1.0 - rho * rho)
    return (rho_bar + rho * (0.5 * math.pi + math.asin(rho))) / (2.0 * math.pi)


def unmatched_origin_constant(rho, kind):
    """Origin value exp(-Q(0, 0)) from an unmatched coefficient choice.

    Kept for comparison: it misses the exact residual that
    ``match_correction_coeffs`` reproduces.

    Heaviside: g_h rho / 2pi with g_h = arcsin rho.  ReLU: g_r / 2pi with
    g_r = arcsin rho + rho / (1 + rho_bar).
    """
    rho_bar = math.sqrt(1.0 - rho * rho)
    if kind == gm.HEAVISIDE:
        return math.asin(rho) * rho / (2.0 * math.pi)
    return (math.asin(rho) + rho / (1.0 + rho_bar)) / (2.0 * math.pi)


DEFAULT_MU_GRID = tuple(float(m) for m in range(-6, 7))
DEFAULT_RHO_LIST = (-0.9, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.9)
RESIDUAL_COLUMNS = ("mu1", "mu2", "rho", "exact", "approx", "abs_err")


def residual_map(kind, mu_grid=DEFAULT_MU_GRID, rho_list=DEFAULT_RHO_LIST, spec=DEFAULT_SPEC):
    """Sweep closed-form I against quadrature; one dict per (mu1, mu2, rho)."""
    if len(mu_grid) == 0 or len(rho_list) == 0:
        raise ValueError("grids must be nonempty")
    rows = []
    for rho in rho_list:
        for mu1 in mu_grid:
            for mu2 in mu_grid:
                exact = exact_I(mu1, mu2, rho, kind, spec)
                approx = gm.cross_moment_dimensionless(
                    gm.BivariateStats(mu1, mu2, rho, math.sqrt(1.0 - rho * rho), 1.0), kind
                )
                rows.append(
                    dict(mu1=mu1, mu2=mu2, rho=rho, exact=exact, approx=approx, abs_err=abs(exact - approx))
                )
    return rows


def write_residual_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESIDUAL_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) for k in RESIDUAL_COLUMNS})


@dataclass
class MCMoments:
    """Empirical output moments from weight sampling.

    ``mean`` ``(B, K)``, ``cov`` ``(B, K, K)``; ``mean_se`` and ``var_se`` are
    standard errors of the mean and of the diagonal variances; ``outputs``
    keeps the raw draws ``(S, B, K)`` for histograms.
    """

    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    var_se: np.ndarray
    outputs: np.ndarray

    @property
    def std(self):
        return np.sqrt(np.diagonal(self.cov, axis1=-2, axis2=-1))

    @property
    def std_se(self):
        # delta method: se(sqrt v) = se(v) / (2 sqrt v)
        return self.var_se / np.maximum(2.0 * self.std, 1e-300)


def mc_forward(spec, params, x, samples=20000, seed=0, chunk=250):
    """Push ``samples`` weight draws from q through the network at inputs x."""
    if samples < 100:
        raise ValueError("samples must be at least 100")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    outs = []
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(spec.layer_shapes):
            w_sd = np.exp(0.5 * params[f"W{i}_logvar"])
            b_sd = np.exp(0.5 * params[f"b{i}_logvar"])
            weights.append(params[f"W{i}_mean"] + w_sd * rng.standard_normal((n, n_in, n_out)))
            biases.append(params[f"b{i}_mean"] + b_sd * rng.standard_normal((n, 1, n_out)))
        outs.append(network.sampled_forward(spec, weights, biases, x))
        done += n
    out = np.concatenate(outs, axis=0)
    mean = out.mean(axis=0)
    centered = out - mean
    cov = np.einsum("sbi,sbj->bij", centered, centered) / (samples - 1)
    sq = centered**2
    mean_se = out.std(axis=0, ddof=1) / math.sqrt(samples)
    var_se = sq.std(axis=0, ddof=1) / math.sqrt(samples)
    return MCMoments(mean, cov, mean_se, var_se, out)
