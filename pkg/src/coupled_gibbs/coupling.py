"""Couplings of pairs of distributions.

All routines take an explicit numpy ``Generator`` and keep no state. Maximal
couplings copy ``x`` into ``y`` when they succeed, so ``met`` always means the
two outputs are bitwise identical.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import _special
from ._validation import as_vector, check_lower_factor, check_positive
from .rng import uniform_open

REFLECTION_MOMENT_CONSTANT = 12.0 + 8.0 * np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class GaussianPair:
    """Two Gaussians N(xi, LL^T) and N(nu, LL^T) sharing one covariance factor.

    ``chol`` is either a lower-triangular ``(d, d)`` matrix or a length-``d``
    vector holding the diagonal of a diagonal factor.
    """

    xi: np.ndarray
    nu: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        xi = as_vector(self.xi, "xi")
        nu = as_vector(self.nu, "nu")
        if xi.shape != nu.shape:
            raise ValueError("xi and nu must have the same length")
        chol = check_lower_factor(self.chol, xi.shape[0])
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.xi.shape[0]

    def apply_factor(self, v):
        return self.chol * v if self.chol.ndim == 1 else self.chol @ v

    def solve_factor(self, v):
        if self.chol.ndim == 1:
            return v / self.chol
        return solve_triangular(self.chol, v, lower=True, check_finite=False)

    def standardized_gap(self):
        """z = L^{-1}(xi - nu)."""
        return self.solve_factor(self.xi - self.nu)


@dataclass
class CoupleDraw:
    x: np.ndarray
    y: np.ndarray
    met: bool
    n_proposals: int = field(default=1)


def tv_gaussian_same_cov(pair: GaussianPair) -> float:
    """Total variation between N(xi, S) and N(nu, S): erf(||L^{-1}(xi-nu)|| / sqrt(8))."""
    z = pair.standardized_gap()
    return float(_special.erf(np.linalg.norm(z) / _special.SQRT8))


def _copy(x):
    return x.copy() if isinstance(x, np.ndarray) else x


def _check_logdensity(value, finite_required, label):
    value = float(value)
    if np.isnan(value) or value == np.inf or (finite_required and not np.isfinite(value)):
        raise ValueError(f"non-finite log-density {label}: {value}")
    return value


def max_rejection_coupling(sampler_p, logdensity_p, sampler_q, logdensity_q, rng, max_trials=10**6):
    """Maximal coupling of p and q by rejection sampling.

    Parameters
    ----------
    sampler_p, sampler_q : callable
        ``sampler(rng)`` returns one draw from the law.
    logdensity_p, logdensity_q : callable
        Log-densities with respect to a common dominating measure.
    rng : numpy.random.Generator
    max_trials : int
        Failsafe on the number of resampling rounds for ``y``.

    Returns
    -------
    CoupleDraw
        ``n_proposals`` counts every draw from p or q, including the first one.
        Its expectation is 2 whatever the pair of laws.
    """
    x = sampler_p(rng)
    lpx = _check_logdensity(logdensity_p(x), True, "p(x)")
    lqx = _check_logdensity(logdensity_q(x), False, "q(x)")
    with np.errstate(divide="ignore"):
        if np.log(rng.random()) + lpx <= lqx:
            return CoupleDraw(x, _copy(x), True, 1)
        for trial in range(1, max_trials + 1):
            y = sampler_q(rng)
            lqy = _check_logdensity(logdensity_q(y), True, "q(y)")
            lpy = _check_logdensity(logdensity_p(y), False, "p(y)")
            if np.log(rng.random()) + lqy > lpy:
                return CoupleDraw(x, y, False, 1 + trial)
    raise RuntimeError(f"rejection coupling exceeded max_trials={max_trials}")


def max_reflection_coupling(pair: GaussianPair, rng) -> CoupleDraw:
    """Maximal reflection coupling of N(xi, S) and N(nu, S).

    Always consumes one standard normal vector and one uniform.
    """
    xdot = rng.standard_normal(pair.dim)
    w = rng.random()
    x = pair.xi + pair.apply_factor(xdot)
    z = pair.standardized_gap()
    znorm = np.linalg.norm(z)
    if znorm == 0.0:
        return CoupleDraw(x, x.copy(), True)
    with np.errstate(divide="ignore"):
        accept = np.log(w) <= -0.5 * float(z @ (2.0 * xdot + z))
    if accept:
        return CoupleDraw(x, x.copy(), True)
    e = z / znorm
    ydot = xdot - 2.0 * float(e @ xdot) * e
    y = pair.nu + pair.apply_factor(ydot)
    return CoupleDraw(x, y, bool(np.array_equal(x, y)))


def reflection_second_moment_bound(pair: GaussianPair, A=None) -> float:
    """Upper bound on E[||A(X - Y)||^2 | X != Y] under reflection coupling.

    Valid when the standardized gap has norm at most one.
    """
    z = pair.standardized_gap()
    diff = pair.xi - pair.nu
    if A is not None:
        diff = np.asarray(A) @ diff
    return float(diff @ diff) * REFLECTION_MOMENT_CONSTANT / float(z @ z) ** 2


def _apply(factor, v):
    factor = np.asarray(factor, dtype=float)
    return factor * v if factor.ndim == 1 else factor @ v


def crn_coupling(xi, F, nu, G, rng) -> CoupleDraw:
    """Common random numbers: X = xi + F Z, Y = nu + G Z with one shared Z.

    ``F`` and ``G`` may be full ``(d, d)`` factors or diagonal vectors.
    """
    xi = as_vector(xi, "xi")
    nu = as_vector(nu, "nu")
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    d = xi.shape[0]
    if nu.shape[0] != d or F.shape[0] != d or G.shape[0] != d:
        raise ValueError("dimension mismatch between means and factors")
    for M in (F, G):
        if M.ndim == 2 and M.shape[1] != d:
            raise ValueError("dimension mismatch between means and factors")
    z = rng.standard_normal(d)
    x = xi + _apply(F, z)
    y = nu + _apply(G, z)
    return CoupleDraw(x, y, bool(np.array_equal(x, y)))


def monotone_coupling(invcdf_p, invcdf_q, rng) -> CoupleDraw:
    """Univariate W2-optimal coupling X = F_p^{-1}(U), Y = F_q^{-1}(U)."""
    u = uniform_open(rng)
    x = float(invcdf_p(u))
    y = float(invcdf_q(u))
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError(f"inverse CDF returned a non-finite value at u={u}")
    return CoupleDraw(x, y, x == y)


def truncated_normal_moments(mu, sigma, alpha):
    """First two moments of N(mu, sigma^2) truncated to (alpha, inf).

    Returns
    -------
    mean, second_moment : float
    """
    sigma = check_positive(sigma, "sigma")
    a = (alpha - mu) / sigma
    lam = float(_special.mills_lambda(a))
    ratio = a * lam if lam > 0 else 0.0
    mean = mu + sigma * lam
    second = sigma**2 + sigma**2 * ratio + mu**2 + 2.0 * mu * sigma * lam
    return float(mean), float(second)


def meeting_prob_product(z):
    """Maximal meeting probabilities for a joint draw and for a product coupling.

    ``z`` holds standardized mean gaps of a Gaussian pair with identity
    covariance. Returns ``(joint, product)`` where ``joint`` couples the whole
    vector at once and ``product`` couples each coordinate independently.
    """
    z = as_vector(z, "z")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    joint = float(_special.erfc(np.linalg.norm(z) / _special.SQRT8))
    product = float(np.prod(_special.erfc(np.abs(z) / _special.SQRT8)))
    return joint, product


# Vectorized couplings used inside model sweeps --------------------------------


def reflection_coupling_diag(mean_x, mean_y, sd, rng):
    """Maximal reflection coupling of two Gaussians with a shared diagonal covariance.

    Returns ``(x, y, met)``; consumes one normal vector and one uniform.
    """
    pair = GaussianPair(np.atleast_1d(mean_x), np.atleast_1d(mean_y), np.broadcast_to(sd, np.shape(np.atleast_1d(mean_x))))
    draw = max_reflection_coupling(pair, rng)
    return draw.x, draw.y, draw.met


def rejection_coupling_diag(mean_x, sd_x, mean_y, sd_y, rng, max_trials=10**6):
    """Maximal rejection coupling of two diagonal Gaussians (possibly different covariances)."""
    mean_x = np.atleast_1d(np.asarray(mean_x, dtype=float))
    mean_y = np.atleast_1d(np.asarray(mean_y, dtype=float))
    sd_x = np.broadcast_to(np.asarray(sd_x, dtype=float), mean_x.shape)
    sd_y = np.broadcast_to(np.asarray(sd_y, dtype=float), mean_y.shape)
    n = mean_x.shape[0]
    draw = max_rejection_coupling(
        lambda r: mean_x + sd_x * r.standard_normal(n),
        lambda v: float(np.sum(_special.norm_logpdf(v, mean_x, sd_x))),
        lambda r: mean_y + sd_y * r.standard_normal(n),
        lambda v: float(np.sum(_special.norm_logpdf(v, mean_y, sd_y))),
        rng,
        max_trials,
    )
    return draw.x, draw.y, draw.met


def coordinatewise_rejection_normal(mean_x, mean_y, sd, rng, max_trials=10**6):
    """Independent maximal rejection couplings of N(mean_x[i], sd^2) and N(mean_y[i], sd^2).

    Vectorized over coordinates; each coordinate runs its own rejection loop.
    Returns ``(x, y, met)`` with ``met`` a boolean mask.
    """
    mean_x = np.asarray(mean_x, dtype=float)
    mean_y = np.asarray(mean_y, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean_x.shape)
    n = mean_x.shape[0]
    x = mean_x + sd * rng.standard_normal(n)
    with np.errstate(divide="ignore"):
        logw = np.log(rng.random(n))
    lpx = _special.norm_logpdf(x, mean_x, sd)
    lqx = _special.norm_logpdf(x, mean_y, sd)
    met = logw + lpx <= lqx
    y = np.where(met, x, 0.0)
    todo = np.flatnonzero(~met)
    trials = 0
    batch = 8
    while todo.size:
        # a batch of candidates per pending coordinate; the first accepted one is kept,
        # which is the same law as a sequential loop
        trials += batch
        if trials > max_trials:
            raise RuntimeError(f"rejection coupling exceeded max_trials={max_trials}")
        my, mx, s_ = mean_y[todo, None], mean_x[todo, None], sd[todo, None]
        cand = my + s_ * rng.standard_normal((todo.size, batch))
        with np.errstate(divide="ignore"):
            logw = np.log(rng.random((todo.size, batch)))
        keep = logw + _special.norm_logpdf(cand, my, s_) > _special.norm_logpdf(cand, mx, s_)
        hit = keep.any(axis=1)
        first = np.argmax(keep, axis=1)
        rows = np.flatnonzero(hit)
        y[todo[rows]] = cand[rows, first[rows]]
        todo = todo[~hit]
    return x, y, met


def coordinatewise_reflection_normal(mean_x, mean_y, sd, rng):
    """Independent one-dimensional reflection couplings, one per coordinate."""
    mean_x = np.asarray(mean_x, dtype=float)
    mean_y = np.asarray(mean_y, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean_x.shape)
    n = mean_x.shape[0]
    xdot = rng.standard_normal(n)
    with np.errstate(divide="ignore"):
        logw = np.log(rng.random(n))
    z = (mean_x - mean_y) / sd
    x = mean_x + sd * xdot
    met = (z == 0.0) | (logw <= -0.5 * z * (2.0 * xdot + z))
    # in one dimension the reflection of xdot is -xdot
    y = np.where(met, x, mean_y - sd * xdot)
    return x, y, met
