"""Crossed-effects GLMM: Metropolis-within-Gibbs with local centering and coupled MH kernels.

Model: y_n ~ f(. | eta_n), eta_n = mu + sum_k a^{(k)}_{i_k[n]}, a^{(k)}_i ~ N(0, 1/tau_k),
flat prior on mu. States use the :class:`~coupled_gibbs.crem.CremLayout`
vector layout; the tau_0 slot holds the Gaussian response precision (unused
for the Laplace family).
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_choice, check_int, check_positive
from .chain import PairKernel, euclidean_distance
from .coupling import (
    GaussianPair,
    coordinatewise_rejection_normal,
    coordinatewise_reflection_normal,
    max_reflection_coupling,
    rejection_coupling_diag,
)
from .crem import CremLayout, CrossedDesign, _gamma, _gauss, _tau_vector, regime_probability, simulate_regime

MH_VARIANTS = (
    "blocked_reflection",
    "blocked_maximal",
    "blocked_factorized_reflection",
    "blocked_factorized_maximal",
    "fully_factorized_reflection",
    "fully_factorized_maximal",
)
DEFAULT_PROPOSAL_SD = float(np.sqrt(2.0))


@dataclass(frozen=True)
class GaussianResponse:
    tau0: float = 1.0

    def loglik(self, y, eta):
        r = y - eta
        return -0.5 * self.tau0 * r * r

    def sample(self, eta, rng):
        return eta + rng.standard_normal(np.shape(eta)) / np.sqrt(self.tau0)


@dataclass(frozen=True)
class LaplaceResponse:
    scale: float = 1.0 / np.sqrt(2.0)

    def loglik(self, y, eta):
        return -np.abs(y - eta) / self.scale

    def sample(self, eta, rng):
        return eta + rng.laplace(0.0, self.scale, size=np.shape(eta))


def make_family(name, scale=None, tau0=1.0):
    check_choice(name, "response family", ("gaussian", "laplace"))
    if name == "gaussian":
        return GaussianResponse(float(tau0))
    return LaplaceResponse(1.0 / np.sqrt(2.0) if scale is None else check_positive(scale, "scale"))


# Coupled MH on conditionally independent coordinates -----------------------


def _joint_proposals(xs, ys, sd, rng, kind):
    if kind == "reflection":
        draw = max_reflection_coupling(GaussianPair(xs, ys, np.full(xs.shape, sd)), rng)
        return draw.x, draw.y
    px, py, _ = rejection_coupling_diag(xs, sd, ys, sd, rng)
    return px, py


def _mh_pair(xs, ys, lx, ly, variant, sd, rng, log_target_x, log_target_y):
    """One coupled MH step; returns new states and their per-coordinate log targets."""
    kind = "reflection" if variant.endswith("reflection") else "maximal"
    if variant.startswith("fully"):
        if kind == "reflection":
            px, py, _ = coordinatewise_reflection_normal(xs, ys, sd, rng)
        else:
            px, py, _ = coordinatewise_rejection_normal(xs, ys, sd, rng)
    else:
        px, py = _joint_proposals(xs, ys, sd, rng, kind)
    lpx, lpy = log_target_x(px), log_target_y(py)
    _check_finite_loglik(lpx, lpy)
    if variant.startswith("blocked_") and not variant.startswith("blocked_factorized"):
        logu = np.log(rng.random())
        acc_x = np.full(xs.shape, logu <= float(np.sum(lpx - lx)))
        acc_y = np.full(ys.shape, logu <= float(np.sum(lpy - ly)))
    else:
        with np.errstate(divide="ignore"):
            logu = np.log(rng.random(xs.shape[0]))
        acc_x = logu <= lpx - lx
        acc_y = logu <= lpy - ly
    return np.where(acc_x, px, xs), np.where(acc_y, py, ys), np.where(acc_x, lpx, lx), np.where(acc_y, lpy, ly), acc_x


def _mh_single(xs, lx, variant, sd, rng, log_target):
    """Solo MH kernel matching the marginal of ``variant``."""
    prop = xs + sd * rng.standard_normal(xs.shape[0])
    lp = log_target(prop)
    _check_finite_loglik(lp)
    if variant.startswith("blocked_") and not variant.startswith("blocked_factorized"):
        acc = np.full(xs.shape, np.log(rng.random()) <= float(np.sum(lp - lx)))
    else:
        with np.errstate(divide="ignore"):
            acc = np.log(rng.random(xs.shape[0])) <= lp - lx
    return np.where(acc, prop, xs), np.where(acc, lp, lx), acc


def _check_finite_loglik(*arrays):
    for a in arrays:
        if np.any(np.isnan(a)) or np.any(a == np.inf):
            raise ValueError("non-finite log-likelihood")


def coupled_mh_block(xs, ys, variant, proposal_sd, rng, log_target, log_target_y=None):
    """Coupled random-walk MH step for a target that factorizes over coordinates.

    Parameters
    ----------
    xs, ys : ndarray
        Current states of the two chains.
    variant : str
        One of :data:`MH_VARIANTS`. ``blocked_*`` variants draw one joint
        proposal coupling and ``fully_factorized_*`` variants couple each
        coordinate on its own. ``blocked_reflection`` / ``blocked_maximal``
        accept or reject the whole vector with one uniform; the others accept
        per coordinate with one shared uniform each.
    proposal_sd : float
    log_target : callable
        Maps a state to per-coordinate log densities (vector).
    log_target_y : callable, optional
        Target of the second chain if it differs from the first.

    Returns
    -------
    xs_new, ys_new, met : ndarray, ndarray, boolean ndarray
    """
    check_choice(variant, "variant", MH_VARIANTS)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError("xs and ys must have the same shape")
    log_target_y = log_target if log_target_y is None else log_target_y
    lx, ly = log_target(xs), log_target_y(ys)
    nx, ny, _, _, _ = _mh_pair(xs, ys, lx, ly, variant, proposal_sd, rng, log_target, log_target_y)
    return nx, ny, nx == ny


def laplace_log_target(scale=1.0 / np.sqrt(2.0)):
    return lambda x: -np.abs(x) / scale


def laplace_benchmark_kernel(d, variant, proposal_sd=DEFAULT_PROPOSAL_SD, scale=1.0 / np.sqrt(2.0)) -> PairKernel:
    """Pair kernel of coupled MH on a product of Laplace(0, scale) laws in dimension ``d``."""
    check_int(d, "d", 1)
    check_choice(variant, "variant", MH_VARIANTS)
    lt = laplace_log_target(scale)

    def maximal_step(x, y, rng):
        nx, ny, _, _, _ = _mh_pair(x, y, lt(x), lt(y), variant, proposal_sd, rng, lt, lt)
        return nx, ny, bool(np.array_equal(nx, ny))

    def single_step(x, rng):
        return _mh_single(x, lt(x), variant, proposal_sd, rng, lt)[0]

    return PairKernel(lambda x, y, rng: maximal_step(x, y, rng)[:2], maximal_step, single_step, euclidean_distance)


def laplace_benchmark_run(d, variant, rng, max_iter=10**4, proposal_sd=DEFAULT_PROPOSAL_SD, scale=1.0 / np.sqrt(2.0)):
    """One coupled run from independent target draws.

    Returns ``(T, truncated, fraction_not_coalesced_per_step)``.
    """
    lt = laplace_log_target(scale)
    x = rng.laplace(0.0, scale, d)
    y = rng.laplace(0.0, scale, d)
    lx, ly = lt(x), lt(y)
    fractions = []
    for t in range(1, max_iter + 1):
        x, y, lx, ly, _ = _mh_pair(x, y, lx, ly, variant, proposal_sd, rng, lt, lt)
        frac = float(np.mean(x != y))
        fractions.append(frac)
        if frac == 0.0:
            return t, False, fractions
    return max_iter, True, fractions


# MwG with local centering ------------------------------------------------


class GlmmModel:
    """Crossed-effects GLMM posterior with the locally centred MwG sampler.

    Parameters
    ----------
    design : CrossedDesign
    family : GaussianResponse or LaplaceResponse
    tau : float or sequence
        (tau_0, tau_1, ..., tau_K); tau_0 is ignored by the Laplace family.
    tau_mode : {"fixed", "sample"}
        Whether the effect precisions tau_1..tau_K are updated.
    S : int
        Number of MH steps per coordinate and per factor in each sweep.
    variant : str
        MH coupling used for the centred effects in coupled sweeps.
    """

    def __init__(self, design: CrossedDesign, family=None, tau=1.0, tau_mode="fixed", S=1,
                 variant="fully_factorized_maximal", proposal_sd=DEFAULT_PROPOSAL_SD, tau_shape_convention="paper"):
        self.design = design
        self.family = LaplaceResponse() if family is None else family
        self.tau = _tau_vector(tau, design.K)
        if isinstance(self.family, GaussianResponse):
            self.tau[0] = self.family.tau0
        self.tau_mode = check_choice(tau_mode, "tau_mode", ("fixed", "sample"))
        self.S = check_int(S, "S", 1)
        self.variant = check_choice(variant, "variant", MH_VARIANTS)
        self.proposal_sd = check_positive(proposal_sd, "proposal_sd")
        self.convention = check_choice(tau_shape_convention, "tau_shape_convention", ("paper", "conjugate"))
        self.layout = CremLayout(design.sizes)
        self._levels = [np.ascontiguousarray(design.levels[:, k]) for k in range(design.K)]

    def _offsets(self, v, k):
        off = np.zeros(self.design.N)
        for l in range(self.design.K):
            if l != k:
                off += v[self.layout.a[l]][self._levels[l]]
        return off

    def _log_conditional(self, k, mu, tauk, off):
        lev, y, I = self._levels[k], self.design.y, int(self.design.sizes[k])
        fam = self.family

        def log_target(xi):
            ll = np.bincount(lev, weights=fam.loglik(y, xi[lev] + off), minlength=I)
            d = xi - mu
            return ll - 0.5 * tauk * d * d

        return log_target

    def _tau_params(self, v, k):
        ss = float(np.sum(v[self.layout.a[k]] ** 2))
        count = int(self.design.sizes[k])
        shape = 0.5 * (count - 1) if self.convention == "paper" else 0.5 * (count + 1)
        if ss <= 0 or shape <= 0:
            raise ValueError("degenerate scale draw")
        return shape, 2.0 / ss

    def _sweep(self, states, rng):
        lay = self.layout
        pair = len(states) > 1
        for k in range(self.design.K):
            sl = lay.a[k]
            tauk = [v[lay.tau][k + 1] for v in states]
            xis = [v[0] + v[sl] for v in states]
            # flat prior on mu and xi_i ~ N(mu, 1/tau_k) iid give mu | xi ~ N(mean(xi), 1/(I_k tau_k))
            I = xis[0].shape[0]
            mus, _ = _gauss([float(x.mean()) for x in xis], [1.0 / np.sqrt(I * t) for t in tauk], rng, "maximal")
            targets = [self._log_conditional(k, mu, t, self._offsets(v, k)) for v, mu, t in zip(states, mus, tauk)]
            logs = [lt(x) for lt, x in zip(targets, xis)]
            _check_finite_loglik(*logs)
            for _ in range(self.S):
                if pair:
                    xis[0], xis[1], logs[0], logs[1], _ = _mh_pair(
                        xis[0], xis[1], logs[0], logs[1], self.variant, self.proposal_sd, rng, targets[0], targets[1]
                    )
                else:
                    xis[0], logs[0], _ = _mh_single(xis[0], logs[0], self.variant, self.proposal_sd, rng, targets[0])
            for v, mu, xi in zip(states, mus, xis):
                v[0] = mu
                v[sl] = xi - mu
            if self.tau_mode == "sample":
                params = [self._tau_params(v, k) for v in states]
                vals, _ = _gamma([p[0] for p in params], [p[1] for p in params], rng, "maximal")
                for v, t in zip(states, vals):
                    v[lay.n_effects + k + 1] = t
        return bool(np.array_equal(states[0], states[1])) if pair else True

    def single_step(self, v, rng):
        v = np.array(v, dtype=float)
        self._sweep([v], rng)
        return v

    def coupled_step(self, vx, vy, rng):
        vx, vy = np.array(vx, dtype=float), np.array(vy, dtype=float)
        met = self._sweep([vx, vy], rng)
        return vx, vy, met

    def pair_kernel(self) -> PairKernel:
        # one-step coupling: the maximal move is used at every iteration
        return PairKernel(
            contractive_step=lambda x, y, rng: self.coupled_step(x, y, rng)[:2],
            maximal_step=self.coupled_step,
            single_step=self.single_step,
            distance=euclidean_distance,
        )

    def default_eps(self):
        return np.inf

    def sample_initial(self, rng):
        v = np.empty(self.layout.dim)
        v[: self.layout.n_effects] = rng.standard_normal(self.layout.n_effects)
        v[self.layout.tau] = self.tau
        if self.tau_mode == "sample":
            v[self.layout.n_effects + 1 :] = rng.gamma(1.0, 1.0, size=self.design.K)
        return v


def mwg_local_centering_sweep(state_vector, model: GlmmModel, rng):
    return model.single_step(state_vector, rng)


def coupled_glmm_sweep(state_x, state_y, model: GlmmModel, rng):
    return model.coupled_step(state_x, state_y, rng)


def simulate_glmm(regime, K, I, tau, family, rng, mu=0.0) -> CrossedDesign:
    """Crossed design from the regime generator with responses drawn from ``family``."""
    design = simulate_regime(regime, K, I, tau, rng, mu)
    taus = _tau_vector(tau, K)
    effects = [rng.standard_normal(I) / np.sqrt(taus[k + 1]) for k in range(K)]
    eta = mu + sum(effects[k][design.levels[:, k]] for k in range(K))
    return design.with_y(family.sample(eta, rng))

