"""Scalar special functions and inverse-CDF samplers used across the package."""

import numpy as np
from scipy import special

SQRT2 = np.sqrt(2.0)
SQRT8 = np.sqrt(8.0)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def erf(x):
    return special.erf(x)


def erfc(x):
    return special.erfc(x)


def erfinv(p):
    """Inverse error function with one Newton correction on top of scipy's value.

    The correction uses ``erf'(x) = 2/sqrt(pi) exp(-x^2)`` and is skipped where
    the derivative underflows (|p| extremely close to 1).
    """
    p = np.asarray(p, dtype=float)
    x = special.erfinv(p)
    deriv = 2.0 / np.sqrt(np.pi) * np.exp(-x * x)
    ok = np.isfinite(x) & (deriv > 0)
    step = np.where(ok, (special.erf(x) - p) / np.where(ok, deriv, 1.0), 0.0)
    out = x - step
    return out if out.ndim else float(out)


def mills_lambda(alpha_std):
    """phi(a) / (1 - Phi(a)) evaluated without cancellation.

    Uses the scaled complementary error function so that large positive
    arguments (where 1 - Phi underflows) stay finite and very negative
    arguments give 0 instead of 0/1 round-off.
    """
    a = np.asarray(alpha_std, dtype=float)
    with np.errstate(over="ignore"):
        denom = special.erfcx(a / SQRT2)
    return np.sqrt(2.0 / np.pi) / denom


def norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - LOG_SQRT_2PI


def truncnorm_lower_ppf(u, mean, sd, lower=0.0):
    """Inverse CDF of N(mean, sd^2) truncated to (lower, inf).

    For truncation points in the upper tail the survival form is used, on the
    log scale, so that 1 - Phi(alpha) never underflows to zero.
    """
    u = np.asarray(u, dtype=float)
    alpha = (lower - mean) / sd
    if alpha <= 0.0:
        lo = special.ndtr(alpha)
        z = special.ndtri(lo + u * (1.0 - lo))
    else:
        # P(Z > z) = (1 - u) P(Z > alpha)
        z = -special.ndtri_exp(special.log_ndtr(-alpha) + np.log1p(-u))
    z = np.maximum(z, alpha)
    return mean + sd * z


def truncnorm_lower_logpdf(x, mean, sd, lower=0.0):
    x = np.asarray(x, dtype=float)
    alpha = (lower - mean) / sd
    logz = special.log_ndtr(-alpha)
    out = norm_logpdf(x, mean, sd) - logz
    return np.where(x > lower, out, -np.inf)


def truncnorm_lower_rvs(rng, mean, sd, lower=0.0):
    """Draw from N(mean, sd^2) truncated to (lower, inf).

    Inverse CDF is the primary route; an exponential-proposal rejection
    sampler takes over if the tail computation fails to produce a finite value.
    """
    x = truncnorm_lower_ppf(rng.random(), mean, sd, lower)
    if np.isfinite(x) and x >= lower:
        return float(x)
    alpha = (lower - mean) / sd
    rate = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
    while True:
        z = alpha + rng.exponential(1.0 / rate)
        if np.log(rng.random()) <= -0.5 * (z - rate) ** 2:
            return float(mean + sd * z)


def gamma_ppf(u, shape, scale):
    """Inverse CDF of Gamma(shape, scale) (shape/scale parameterization)."""
    return special.gammaincinv(shape, u) * scale


def gamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = (shape - 1.0) * np.log(x) - x / scale - special.gammaln(shape) - shape * np.log(scale)
    return np.where(x > 0, out, -np.inf)
