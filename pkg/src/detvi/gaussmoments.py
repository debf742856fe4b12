"""Closed-form moment propagation through Bayesian linear layers.

Activations ``a`` are carried as Gaussians (mean, covariance).  A layer maps
``a' -> h = f(a') -> a = h W + b`` with factorized Gaussian ``W`` and ``b``.
Means and covariances of ``h`` are exact for the diagonal; off-diagonal
second moments use the asymptote-plus-Gaussian-correction approximation

    <h_j h_l> = S_jl * (A(mu_j, mu_l, rho) + (alpha/2pi) exp(-beta (mu_j^2 + mu_l^2) + gamma mu_j mu_l))

with dimensionless means ``mu = <a'>/sqrt(Sigma'_jj)`` and correlation ``rho``.

Everything here is written against :mod:`detvi.gradcore`, so the same code
evaluates plain numpy arrays or records a differentiable forward pass.  A
leading batch dimension on means and covariances is supported throughout.
"""

import math
from dataclasses import dataclass

import numpy as np

from detvi import gradcore as G
from detvi.gradcore import value

HEAVISIDE = "heaviside"
RELU = "relu"
KINDS = (HEAVISIDE, RELU)

FULL = "full"
DIAGONAL = "diagonal"
MODES = (FULL, DIAGONAL)

RHO_CLAMP = 1.0 - 1e-6
RHO_CUTOFF = 1e-8
VAR_FLOOR = 1e-12
TWO_PI = 2.0 * math.pi


@dataclass
class LayerParams:
    """Factorized Gaussian over one layer's weights (H' x H) and biases (H)."""

    weight_mean: object
    weight_logvar: object
    bias_mean: object
    bias_logvar: object

    @property
    def weight_var(self):
        return G.exp(self.weight_logvar)

    @property
    def bias_var(self):
        return G.exp(self.bias_logvar)

    @property
    def shape(self):
        return value(self.weight_mean).shape

    def check(self):
        w = value(self.weight_mean)
        if w.ndim != 2:
            raise ValueError(f"weight_mean must be 2-D, got shape {w.shape}")
        if value(self.weight_logvar).shape != w.shape:
            raise ValueError("weight_logvar shape differs from weight_mean")
        for name in ("bias_mean", "bias_logvar"):
            if value(getattr(self, name)).shape != (w.shape[1],):
                raise ValueError(f"{name} must have shape ({w.shape[1]},)")


@dataclass
class GaussianActivation:
    """Mean ``(..., d)`` and covariance, full ``(..., d, d)`` or diagonal ``(..., d)``."""

    mean: object
    cov: object
    diagonal: bool = False

    @property
    def dim(self):
        return value(self.mean).shape[-1]

    def variances(self):
        return self.cov if self.diagonal else G.diagonal(self.cov)

    def full_cov(self):
        return G.diag_embed(self.cov) if self.diagonal else self.cov

    def check(self, sym_tol=1e-10, eig_tol=-1e-8):
        cov = value(self.cov)
        if self.diagonal:
            if np.any(cov < 0):
                raise ValueError("negative variance")
            return
        if np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0) > sym_tol:
            raise ValueError("covariance not symmetric")
        if np.any(np.diagonal(cov, axis1=-2, axis2=-1) < 0):
            raise ValueError("negative variance")
        eig = np.linalg.eigvalsh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
        if np.min(eig, initial=0.0) < eig_tol * max(1.0, np.max(np.abs(eig), initial=0.0)):
            raise ValueError(f"covariance not PSD (min eigenvalue {np.min(eig):.3g})")


@dataclass(frozen=True)
class BivariateStats:
    mu1: float
    mu2: float
    rho: float
    rho_bar: float
    scale: float

    @classmethod
    def from_moments(cls, mean, cov):
        """Dimensionless statistics of a 2-D Gaussian over (a_j, a_l)."""
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        sj, sl = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
        rho = cov[0, 1] / (sj * sl)
        return cls(mean[0] / sj, mean[1] / sl, rho, math.sqrt(1.0 - rho * rho), sj * sl)


@dataclass(frozen=True)
class CorrectionCoeffs:
    """Correction ``(alpha/2pi) exp(-beta (mu1^2 + mu2^2) + gamma mu1 mu2)``.

    ``alpha/2pi`` is the residual ``I - A`` at the origin (signed), ``beta``
    and ``gamma`` reproduce its Hessian there.
    """

    alpha: float
    beta: float
    gamma: float
    nonlinearity: str


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown nonlinearity {kind!r}; expected one of {KINDS}")


def _check_sigma2(sigma2):
    if np.any(value(sigma2) < 0):
        raise ValueError("variance must be non-negative")


def _unit(mu, sigma2):
    """Return (det mask, sqrt(var), mu/sqrt(var)) with zero-variance entries masked."""
    s2 = value(sigma2)
    det = s2 <= 0
    if np.any(det):
        sigma2 = G.where(det, 1.0, sigma2)
    tiny = (~det) & (s2 < VAR_FLOOR)
    if np.any(tiny):
        sigma2 = G.where(tiny, VAR_FLOOR, sigma2)
    s = G.sqrt(sigma2)
    return det, s, G.divide(mu, s)


def _step(mu):
    return (value(mu) > 0).astype(np.float64)


def _masked(det, det_value, stoch):
    if np.any(det):
        return G.where(det, det_value, stoch)
    return stoch


# --------------------------------------------------------------------------
# diagonal moments


def nonlin_mean(mu, sigma2, kind):
    """<f(a)> for a ~ N(mu, sigma2)."""
    _check_kind(kind)
    _check_sigma2(sigma2)
    det, s, m = _unit(mu, sigma2)
    if kind == HEAVISIDE:
        return _masked(det, _step(mu), G.std_normal_cdf(m))
    det_value = np.maximum(value(mu), 0.0) if np.any(det) else 0.0
    return _masked(det, det_value, s * G.soft_relu(m))


def nonlin_sq_mean(mu, sigma2, kind):
    """<f(a)^2> for a ~ N(mu, sigma2)."""
    _check_kind(kind)
    _check_sigma2(sigma2)
    det, s, m = _unit(mu, sigma2)
    if kind == HEAVISIDE:
        return _masked(det, _step(mu), G.std_normal_cdf(m))
    det_value = np.maximum(value(mu), 0.0) ** 2 if np.any(det) else 0.0
    inner = m * G.std_normal_pdf(m) + (1.0 + G.square(m)) * G.std_normal_cdf(m)
    return _masked(det, det_value, G.square(s) * inner)


def nonlin_var(mu, sigma2, kind):
    """Var f(a), arranged so large |mu| does not cancel catastrophically."""
    _check_kind(kind)
    _check_sigma2(sigma2)
    det, s, m = _unit(mu, sigma2)
    up = G.std_normal_cdf(m)
    down = G.std_normal_cdf(-m)
    if kind == HEAVISIDE:
        var = up * down
    else:
        pdf = G.std_normal_pdf(m)
        inner = up + m * pdf * (down - up) + G.square(m) * up * down - G.square(pdf)
        var = G.square(s) * G.clamp(inner, 0.0)
    return _masked(det, 0.0, var)


# --------------------------------------------------------------------------
# cross moments


def asymptote(mu1, mu2, rho, kind):
    _check_kind(kind)
    if kind == HEAVISIDE:
        return G.std_normal_cdf(mu1) * G.std_normal_cdf(mu2)
    return G.soft_relu(mu1) * G.soft_relu(mu2) + rho * G.std_normal_cdf(mu1) * G.std_normal_cdf(mu2)


def _coeffs(rho, kind):
    """Matched (alpha, beta, gamma) for clamped, nonzero rho (arrays or Vars)."""
    rho_sq = G.square(rho)
    rho_bar = G.sqrt(1.0 - rho_sq)
    one_minus_bar = rho_sq / (1.0 + rho_bar)
    g = G.arcsin(rho)
    if kind == HEAVISIDE:
        alpha = g
        beta = rho / (2.0 * alpha * rho_bar)
        gamma = one_minus_bar / (alpha * rho_bar)
    else:
        # rho_bar - 1 + rho*arcsin(rho), written without the 1 - rho_bar cancellation
        alpha = rho * (g - rho / (1.0 + rho_bar))
        beta = one_minus_bar / (2.0 * alpha)
        gamma = (g - rho) / alpha
    return alpha, beta, gamma


def match_correction_coeffs(rho, kind):
    """Correction coefficients matched to value, gradient and Hessian of I - A at mu = 0.

    Heaviside: residual at the origin is arcsin(rho)/2pi, curvature
    -rho/(2pi rho_bar) along each axis and (1 - rho_bar)/(2pi rho_bar) across.
    ReLU: the same three conditions with residual (rho_bar - 1 + rho arcsin rho)/2pi,
    curvature (rho_bar - 1)/2pi and cross term (arcsin rho - rho)/2pi, which
    follow from the exact zero-mean identities for E[x+ y+].
    """
    _check_kind(kind)
    rho = float(rho)
    if abs(rho) >= 1.0:
        raise ValueError("correlation must satisfy |rho| < 1")
    if abs(rho) < RHO_CUTOFF:
        return CorrectionCoeffs(0.0, 0.5, 0.0, kind)
    rho = max(-RHO_CLAMP, min(RHO_CLAMP, rho))
    alpha, beta, gamma = (float(x) for x in _coeffs(np.float64(rho), kind))
    return CorrectionCoeffs(alpha, beta, gamma, kind)


def _coeff_derivs(rho, alpha, kind):
    """d(alpha, beta, gamma)/d rho for the matched coefficients (numpy only)."""
    rho_bar = np.sqrt(1.0 - rho * rho)
    one_minus_bar = rho * rho / (1.0 + rho_bar)
    if kind == HEAVISIDE:
        d_alpha = 1.0 / rho_bar
        d_beta = 1.0 / (2.0 * alpha * rho_bar**3) - rho / (2.0 * alpha**2 * rho_bar**2)
        d_gamma = rho / (alpha * rho_bar**3) - one_minus_bar / (alpha**2 * rho_bar**2)
    else:
        g = np.arcsin(rho)
        d_alpha = g
        d_beta = rho / (2.0 * alpha * rho_bar) - one_minus_bar * d_alpha / (2.0 * alpha**2)
        d_gamma = one_minus_bar / (rho_bar * alpha) - (g - rho) * d_alpha / alpha**2
    return d_alpha, d_beta, d_gamma


def _correction_parts(mu1, mu2, rho, kind):
    rho_c = np.clip(rho, -RHO_CLAMP, RHO_CLAMP)
    small = np.abs(rho_c) < RHO_CUTOFF
    r = np.where(small, 0.5, rho_c)
    alpha, beta, gamma = _coeffs(r, kind)
    return rho_c, small, r, alpha, beta, gamma


def _correction_forward(mu1, mu2, rho, kind=RELU):
    _, small, _, alpha, beta, gamma = _correction_parts(mu1, mu2, rho, kind)
    quad = beta * (mu1 * mu1 + mu2 * mu2) - gamma * (mu1 * mu2)
    return np.where(small, 0.0, alpha / TWO_PI * np.exp(-quad))


def _correction_vjp(g, out, mu1, mu2, rho, kind=RELU):
    _, small, r, alpha, beta, gamma = _correction_parts(mu1, mu2, rho, kind)
    gk = g * out
    d_alpha, d_beta, d_gamma = _coeff_derivs(r, alpha, kind)
    d_log_rho = d_alpha / alpha - d_beta * (mu1 * mu1 + mu2 * mu2) + d_gamma * (mu1 * mu2)
    # clamp: no gradient beyond +-RHO_CLAMP; below the cutoff the output is constant 0
    live = (~small) & (np.abs(rho) <= RHO_CLAMP)
    return (
        G._unbroadcast(gk * (gamma * mu2 - 2.0 * beta * mu1), mu1.shape),
        G._unbroadcast(gk * (gamma * mu1 - 2.0 * beta * mu2), mu2.shape),
        G._unbroadcast(np.where(live, gk * d_log_rho, 0.0), rho.shape),
    )


G.register_primitive("gauss_correction", _correction_forward, _correction_vjp)


def correction(mu1, mu2, rho, kind):
    """Residual model I - A; exactly zero where |rho| < 1e-8.  Arguments broadcast."""
    _check_kind(kind)
    return G.apply("gauss_correction", mu1, mu2, rho, kind=kind)


def cross_moment_dimensionless(b, kind):
    """Approximate I(mu1, mu2, rho) = <f(eta1) f(eta2)> for a unit-variance pair."""
    _check_kind(kind)
    rho = max(-RHO_CLAMP, min(RHO_CLAMP, float(b.rho)))
    return float(asymptote(b.mu1, b.mu2, rho, kind) + correction(b.mu1, b.mu2, rho, kind))


def cross_moment(mu1, mu2, rho, kind):
    """Vectorized form of :func:`cross_moment_dimensionless` over arrays."""
    _check_kind(kind)
    rho_c = G.clamp(rho, -RHO_CLAMP, RHO_CLAMP)
    return asymptote(mu1, mu2, rho_c, kind) + correction(mu1, mu2, rho, kind)


# --------------------------------------------------------------------------
# layers


def _vecmat(v, w):
    """(..., H') @ (H', H) allowing a bare vector on the left."""
    if value(v).ndim == 1:
        out = G.matmul(G.reshape(v, (1, -1)), w)
        return G.reshape(out, (value(w).shape[1],))
    return G.matmul(v, w)


def propagate_linear(h_mean, h_sq_diag, h_cov, layer, mode=FULL):
    """Moments of a = h W + b for independent h, W, b.

    ``h_cov`` is either a full covariance ``(..., H', H')`` or its diagonal
    ``(..., H')``.  With factorized weights the covariance is
    ``diag(<h h> Var W) + <W>^T Cov(h) <W> + diag(Var b)``; Diagonal mode keeps
    only the diagonal of the middle term.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    layer.check()
    n_in, n_out = layer.shape
    hm = value(h_mean)
    if hm.shape[-1] != n_in or value(h_sq_diag).shape != hm.shape:
        raise ValueError(f"activation width {hm.shape[-1]} does not match layer input {n_in}")
    cov_is_diag = value(h_cov).ndim == hm.ndim
    cshape = value(h_cov).shape
    if (cov_is_diag and cshape != hm.shape) or (not cov_is_diag and cshape != hm.shape + (n_in,)):
        raise ValueError(f"covariance shape {cshape} inconsistent with mean shape {hm.shape}")

    w = layer.weight_mean
    mean = _vecmat(h_mean, w) + layer.bias_mean
    noise = _vecmat(h_sq_diag, layer.weight_var) + layer.bias_var

    if mode == DIAGONAL:
        if cov_is_diag:
            term2 = _vecmat(h_cov, G.square(w))
        else:
            term2 = G.sum(G.matmul(h_cov, w) * w, axis=-2)
        return GaussianActivation(mean, noise + term2, diagonal=True)

    if cov_is_diag:
        # W^T diag(c) W
        wt = G.transpose(w)
        scaled = wt * G.reshape(h_cov, value(h_cov).shape[:-1] + (1, n_in))
        term2 = G.matmul(scaled, w)
    else:
        term2 = G.matmul(G.matmul(G.transpose(w), h_cov), w)
    return GaussianActivation(mean, term2 + G.diag_embed(noise), diagonal=False)


def input_layer(x, layer):
    """First layer fed by deterministic inputs x.

    The output units are independent, so the covariance is stored as a
    diagonal; this is exact under both propagation modes.
    """
    x = np.asarray(x, dtype=np.float64)
    return propagate_linear(x, x * x, np.zeros_like(x), layer, DIAGONAL)


def hidden_moments(act, kind, mode=FULL):
    """(<h>, <h h> diagonal, Cov(h)) for h = f(a), a ~ act.

    Cov(h) is returned as a vector when the input covariance is stored
    diagonally or ``mode`` is Diagonal, otherwise as a full matrix.
    """
    _check_kind(kind)
    mean = act.mean
    var = act.variances()
    h_mean = nonlin_mean(mean, var, kind)
    h_sq = nonlin_sq_mean(mean, var, kind)
    h_var = nonlin_var(mean, var, kind)
    if act.diagonal or mode == DIAGONAL:
        return h_mean, h_sq, h_var

    det, s, mu = _unit(mean, var)
    d = value(mean).shape[-1]
    batch = value(mean).shape[:-1]
    col = batch + (d, 1)
    row = batch + (1, d)
    s_j, s_l = G.reshape(s, col), G.reshape(s, row)
    mu_j, mu_l = G.reshape(mu, col), G.reshape(mu, row)
    rho = act.cov / (s_j * s_l)

    corr = correction(mu_j, mu_l, rho, kind)
    if kind == HEAVISIDE:
        off = corr
    else:
        rho_c = G.clamp(rho, -RHO_CLAMP, RHO_CLAMP)
        # S (I - SR SR) = S (rho Phi Phi + correction); the SR SR part cancels exactly.
        off = s_j * s_l * (rho_c * G.std_normal_cdf(mu_j) * G.std_normal_cdf(mu_l) + corr)

    invalid = np.broadcast_to(np.eye(d, dtype=bool), batch + (d, d)).copy()
    if np.any(det):
        invalid |= det[..., :, None] | det[..., None, :]
    off = G.where(invalid, 0.0, off)
    return h_mean, h_sq, off + G.diag_embed(h_var)


def propagate_layer(act, kind, layer, mode=FULL):
    """Map a' -> a = f(a') W + b under the Gaussian moment approximation."""
    h_mean, h_sq, h_cov = hidden_moments(act, kind, mode)
    return propagate_linear(h_mean, h_sq, h_cov, layer, mode)


def skip_gain(mean, var, kind):
    """E[f'(a_j)]: the factor linking Cov(a'_i, f(a'_j)) to Sigma'_ij."""
    det, s, mu = _unit(mean, var)
    if kind == HEAVISIDE:
        # Density of a_j at zero: phi(mu)/sqrt(Sigma_jj).
        gain = G.std_normal_pdf(mu) / s
    else:
        gain = G.std_normal_cdf(mu)
    return _masked(det, 0.0, gain)


def propagate_skip(act, kind, layer):
    """Residual layer a = a' + f(a') W + b, full covariance."""
    _check_kind(kind)
    layer.check()
    n_in, n_out = layer.shape
    if n_in != n_out:
        raise ValueError(f"skip connection needs a square layer, got {n_in}x{n_out}")
    delta = propagate_layer(act, kind, layer, FULL)
    sigma = act.full_cov()
    gain = skip_gain(act.mean, act.variances(), kind)
    batch = value(act.mean).shape[:-1]
    # Cov(a'_i, delta_k) = sum_j Sigma'_ij gain_j <W_jk>
    cross = G.matmul(sigma * G.reshape(gain, batch + (1, n_in)), layer.weight_mean)
    cov = sigma + delta.cov + cross + G.transpose(cross)
    return GaussianActivation(act.mean + delta.mean, cov, diagonal=False)
