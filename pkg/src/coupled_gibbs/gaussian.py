"""Block Gaussian targets, the Gibbs autoregression they induce, and meeting-time bounds.

For a target N(mu, Q^{-1}) with a block partition, one blocked Gibbs sweep
is an affine Gaussian kernel x -> N(Bx + b, S - B S B^T). This module builds
``B`` and ``b``, a noise factor obtained by composing the block updates, the
joint reflection gap used by the maximal coupling of two kernel draws, and
the closed-form upper bounds on expected meeting times. Everything is dense;
it is the oracle and bound engine, not the hot path of the model samplers.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from . import _special
from ._validation import as_square, as_vector, check_positive
from .chain import BlockCoupler, PairKernel, compose_pair_kernel, euclidean_distance
from .coupling import GaussianPair, max_reflection_coupling

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _normalize_blocks(blocks, d):
    if blocks is None:
        blocks = [1] * d
    out = []
    offset = 0
    for b in blocks:
        if np.ndim(b) == 0:
            length = int(b)
            start = offset
        else:
            start, length = int(b[0]), int(b[1])
        if start != offset or length <= 0:
            raise ValueError("blocks must partition the coordinates in order without overlap")
        out.append((start, length))
        offset += length
    if offset != d:
        raise ValueError(f"blocks cover {offset} coordinates, target has {d}")
    return tuple(out)


class GaussianTarget:
    """Gaussian N(mu, Q^{-1}) with an ordered block partition.

    Parameters
    ----------
    mu : array_like, shape (d,)
    precision : array_like, shape (d, d)
        Symmetric positive-definite precision matrix Q.
    blocks : sequence
        Either block lengths or ``(offset, length)`` pairs, covering 0..d-1 in order.
    """

    def __init__(self, mu, precision, blocks=None):
        self.mu = as_vector(mu, "mu")
        Q = as_square(precision, "precision")
        d = self.mu.shape[0]
        if Q.shape[0] != d:
            raise ValueError("mu and precision dimensions disagree")
        scale = max(np.max(np.abs(Q)), 1e-300)
        if np.max(np.abs(Q - Q.T)) > 1e-12 * scale:
            raise ValueError("precision must be symmetric")
        self.precision = 0.5 * (Q + Q.T)
        try:
            self._chol_q = linalg.cholesky(self.precision, lower=True)
        except linalg.LinAlgError:
            raise ValueError("precision is not positive definite") from None
        self.blocks = _normalize_blocks(blocks, d)
        self._block_cache = {}

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_slice(self, k) -> slice:
        start, length = self.blocks[k]
        return slice(start, start + length)

    @cached_property
    def covariance(self):
        inv = linalg.cho_solve((self._chol_q, True), np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    @cached_property
    def chol_covariance(self):
        """Lower factor L with L L^T = Sigma."""
        return linalg.cholesky(self.covariance, lower=True)

    def block_factors(self, k):
        """(Cholesky of Q_kk, lower factor F_k of Q_kk^{-1})."""
        if k not in self._block_cache:
            sl = self.block_slice(k)
            Qkk = self.precision[sl, sl]
            try:
                ckk = linalg.cholesky(Qkk, lower=True)
            except linalg.LinAlgError:
                raise ValueError(f"block {k} precision is not positive definite") from None
            cov = linalg.cho_solve((ckk, True), np.eye(Qkk.shape[0]))
            F = linalg.cholesky(0.5 * (cov + cov.T), lower=True)
            self._block_cache[k] = (ckk, F)
        return self._block_cache[k]

    def conditional_coefficients(self, k):
        """Rows of -Q_kk^{-1} Q_{k,.} with the diagonal block set to zero."""
        sl = self.block_slice(k)
        ckk, _ = self.block_factors(k)
        A = -linalg.cho_solve((ckk, True), self.precision[sl, :])
        A[:, sl] = 0.0
        return A

    def transformed(self, D):
        """Target of D X for X ~ self, with D block diagonal and invertible."""
        D = as_square(D, "D")
        Dinv = np.linalg.inv(D)
        return GaussianTarget(D @ self.mu, Dinv.T @ self.precision @ Dinv, self.blocks)


@dataclass(frozen=True)
class UpdateSchedule:
    """Sequence of block indices (0-based) updated in one sweep."""

    order: tuple

    def __post_init__(self):
        order = tuple(int(k) for k in self.order)
        if len(order) == 0 or min(order) < 0:
            raise ValueError("schedule must be a non-empty sequence of block indices")
        object.__setattr__(self, "order", order)

    @classmethod
    def forward(cls, n_blocks):
        return cls(tuple(range(n_blocks)))

    @classmethod
    def forward_backward(cls, n_blocks):
        return cls(tuple(range(n_blocks)) + tuple(range(n_blocks - 2, -1, -1)))

    @property
    def reversible(self) -> bool:
        return self.order == self.order[::-1]

    def is_forward(self, n_blocks) -> bool:
        return len(self.order) == n_blocks and sorted(self.order) == list(range(n_blocks))

    def check(self, target):
        if max(self.order) >= target.n_blocks:
            raise ValueError("schedule refers to a block the target does not have")


def full_conditional(target: GaussianTarget, k, x):
    """Mean and covariance factor of block ``k`` given the other blocks of ``x``.

    The entries of block ``k`` in ``x`` are ignored.
    """
    x = as_vector(x, "x")
    sl = target.block_slice(k)
    ckk, F = target.block_factors(k)
    dev = x - target.mu
    dev[sl] = 0.0
    mean = target.mu[sl] - linalg.cho_solve((ckk, True), target.precision[sl, :] @ dev)
    return mean, F


@dataclass(frozen=True)
class AutoRegression:
    """One blocked Gibbs sweep written as x -> B x + b + C z, z ~ N(0, I).

    ``noise_factor`` (C) has one column block per update in the schedule, so
    ``C C^T = Sigma - B Sigma B^T``; its width is the summed size of the
    updated blocks and it may be rank deficient.
    """

    B: np.ndarray
    b: np.ndarray
    noise_factor: np.ndarray
    noise_cov: np.ndarray
    schedule: UpdateSchedule
    target: GaussianTarget
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def noise_chol(self):
        return self.noise_factor

    def step(self, x, z):
        return self.B @ x + self.b + self.noise_factor @ z

    @property
    def noise_dim(self) -> int:
        return self.noise_factor.shape[1]

    def eigen_moduli(self):
        if "eig" not in self._cache:
            self._cache["eig"] = np.abs(np.linalg.eigvals(self.B))
        return self._cache["eig"]

    def spectral_radius(self) -> float:
        return float(np.max(self.eigen_moduli()))

    def is_reversible(self, tol=1e-9) -> bool:
        S = self.target.covariance
        lhs = S @ self.B.T
        return bool(np.max(np.abs(lhs - self.B @ S)) <= tol * max(1.0, np.max(np.abs(S))))


def _block_embedding(target, k):
    sl = target.block_slice(k)
    _, F = target.block_factors(k)
    G = np.zeros((target.dim, F.shape[0]))
    G[sl, :] = F
    return G


def _update_matrix(target, k):
    E = np.eye(target.dim)
    sl = target.block_slice(k)
    E[sl, :] = target.conditional_coefficients(k)
    return E


def bgs_autoregression(target: GaussianTarget, schedule: UpdateSchedule) -> AutoRegression:
    """Affine-Gaussian form of the blocked Gibbs kernel with the given update order."""
    schedule.check(target)
    d = target.dim
    B = np.eye(d)
    cols = np.zeros((d, 0))
    for k in schedule.order:
        E = _update_matrix(target, k)
        B = E @ B
        cols = np.hstack([E @ cols, _block_embedding(target, k)])
    b = target.mu - B @ target.mu
    S = target.covariance
    resid = S - B @ S @ B.T
    resid = 0.5 * (resid + resid.T)
    w = np.linalg.eigvalsh(resid)
    tol = 1e-10 * np.linalg.norm(S, 2)
    if w.min() < -tol:
        raise ValueError("inconsistent target: kernel covariance is not positive semidefinite")
    if w.min() < 0:
        w_full, V = np.linalg.eigh(resid)
        resid = (V * np.clip(w_full, 0.0, None)) @ V.T
    return AutoRegression(B, b, cols, resid, schedule, target)


def relaxation_time(ar: AutoRegression) -> float:
    rho = ar.spectral_radius()
    if rho >= 1.0 - 1e-12:
        raise ValueError(f"non-contracting kernel: spectral radius {rho}")
    return 1.0 / (1.0 - rho)


def sweep_from_noise(target: GaussianTarget, schedule: UpdateSchedule, x, noises):
    """One explicit blocked Gibbs sweep using the supplied standard normal vectors."""
    x = np.array(x, dtype=float)
    for k, z in zip(schedule.order, noises):
        mean, F = full_conditional(target, k, x)
        x[target.block_slice(k)] = mean + F @ z
    return x


def joint_reflection_z(target: GaussianTarget, schedule: UpdateSchedule, diff, ar: AutoRegression | None = None):
    """Standardized gap z with C z = B diff, C the composed noise factor.

    For a forward schedule C becomes lower triangular once its rows are
    ordered by update, and the last update's component of z is zero, so a
    triangular solve over the earlier blocks suffices. Other schedules use
    the minimum-norm solution.
    """
    if ar is None:
        ar = bgs_autoregression(target, schedule)
    diff = as_vector(diff, "diff")
    rhs = ar.B @ diff
    if schedule.is_forward(target.n_blocks):
        rows = np.concatenate([np.arange(target.dim)[target.block_slice(k)] for k in schedule.order])
        n_lead = target.dim - target.blocks[schedule.order[-1]][1]
        z = np.zeros(target.dim)
        lead = rows[:n_lead]
        z[:n_lead] = linalg.solve_triangular(ar.noise_factor[np.ix_(lead, np.arange(n_lead))], rhs[lead], lower=True,
                                             check_finite=False)
        return z
    return np.linalg.lstsq(ar.noise_factor, rhs, rcond=None)[0]


def kernel_tv_distance(ar: AutoRegression, x, y) -> float:
    """TV distance between the kernel laws started at x and at y."""
    z = joint_reflection_z(ar.target, ar.schedule, np.asarray(x) - np.asarray(y), ar)
    return float(_special.erf(np.linalg.norm(z) / _special.SQRT8))


# Pair kernels ------------------------------------------------------------


class GaussianBlockCoupler(BlockCoupler):
    """Full-conditional update of one block, with CRN and reflection couplings."""

    def __init__(self, target: GaussianTarget, k):
        self.target = target
        self.k = k
        self.sl = target.block_slice(k)

    def single(self, x, rng):
        mean, F = full_conditional(self.target, self.k, x)
        x[self.sl] = mean + F @ rng.standard_normal(F.shape[0])

    def contractive(self, x, y, rng):
        mx, F = full_conditional(self.target, self.k, x)
        my, _ = full_conditional(self.target, self.k, y)
        z = rng.standard_normal(F.shape[0])
        x[self.sl] = mx + F @ z
        y[self.sl] = my + F @ z

    def maximal(self, x, y, rng):
        mx, F = full_conditional(self.target, self.k, x)
        my, _ = full_conditional(self.target, self.k, y)
        draw = max_reflection_coupling(GaussianPair(mx, my, F), rng)
        x[self.sl] = draw.x
        y[self.sl] = draw.y
        return draw.met


def composed_pair_kernel(target: GaussianTarget, schedule: UpdateSchedule, distance="euclidean") -> PairKernel:
    """Blockwise CRN / blockwise maximal reflection, composed in schedule order."""
    schedule.check(target)
    pk = compose_pair_kernel([GaussianBlockCoupler(target, k) for k in schedule.order])
    if distance == "tv":
        ar = bgs_autoregression(target, schedule)
        pk.distance = lambda x, y: kernel_tv_distance(ar, x, y)
    elif distance != "euclidean":
        pk.distance = distance
    return pk


def joint_pair_kernel(ar: AutoRegression, distance="tv") -> PairKernel:
    """CRN and joint maximal reflection coupling of the whole sweep kernel."""
    C = ar.noise_factor
    M = C.shape[1]

    def single_step(x, rng):
        return ar.step(x, rng.standard_normal(M))

    def contractive_step(x, y, rng):
        z = rng.standard_normal(M)
        return ar.step(x, z), ar.step(y, z)

    def maximal_step(x, y, rng):
        xdot = rng.standard_normal(M)
        w = rng.random()
        xn = ar.step(x, xdot)
        z = joint_reflection_z(ar.target, ar.schedule, np.asarray(x) - np.asarray(y), ar)
        zn = np.linalg.norm(z)
        with np.errstate(divide="ignore"):
            if zn == 0.0 or np.log(w) <= -0.5 * float(z @ (2.0 * xdot + z)):
                return xn, xn.copy(), True
        e = z / zn
        ydot = xdot - 2.0 * float(e @ xdot) * e
        yn = ar.step(y, ydot)
        return xn, yn, bool(np.array_equal(xn, yn))

    dist = (lambda x, y: kernel_tv_distance(ar, x, y)) if distance == "tv" else euclidean_distance
    return PairKernel(contractive_step, maximal_step, single_step, dist)


# Bounds ------------------------------------------------------------------


def c_epsilon(eps) -> float:
    """Additive constant of the meeting-time bounds for TV threshold ``eps`` in (0, 0.5)."""
    eps = float(eps)
    if not (0.0 < eps < 0.5):
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    r = float(_special.erfinv(eps))
    return (
        -np.log(2.0 * np.sqrt(2.0) * r)
        + 2.0 * np.log(12.0 + 8.0 * SQRT_2_OVER_PI) * r
        + np.sqrt(2.0) / (np.sqrt(np.pi) * np.e)
    )


def c_epsilon_majorant(eps) -> float:
    """Simpler upper bound 6 r - ln r, r = erfinv(eps)."""
    eps = float(eps)
    if not (0.0 < eps < 0.5):
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    r = float(_special.erfinv(eps))
    return 6.0 * r - np.log(r)


def start_log_distance(target: GaussianTarget, x0, y0, target_chol=None) -> float:
    """C_0 = ln ||L^{-1}(x0 - y0)|| with L L^T = Sigma (minus infinity when x0 = y0)."""
    diff = as_vector(x0, "x0") - as_vector(y0, "y0")
    if target_chol is not None:
        norm = np.linalg.norm(linalg.solve_triangular(target_chol, diff, lower=True))
    else:
        norm = np.sqrt(max(float(diff @ target.precision @ diff), 0.0))
    with np.errstate(divide="ignore"):
        return float(np.log(norm))


def bound_reversible(ar: AutoRegression, target_chol, x0, y0, eps) -> float:
    """Meeting-time bound for reversible schedules, with the exact log spectral gap."""
    if not ar.is_reversible():
        raise ValueError("schedule is not reversible; use bound_general")
    c0 = start_log_distance(ar.target, x0, y0, target_chol)
    if c0 == -np.inf:
        return 4.0
    relaxation_time(ar)
    moduli = ar.eigen_moduli()
    rho, lam_min = float(moduli.max()), float(moduli.min())
    if rho == 0.0:
        return 4.0
    bracket = -0.5 * np.log1p(-lam_min**2) + c0 + c_epsilon(eps)
    return 4.0 + bracket / (-np.log(rho))


def bound_relaxation_form(ar: AutoRegression, x0, y0, eps, target_chol=None) -> float:
    """Reversible bound relaxed to depend on the relaxation time only."""
    if not ar.is_reversible():
        raise ValueError("schedule is not reversible; use bound_general")
    c0 = start_log_distance(ar.target, x0, y0, target_chol)
    if c0 == -np.inf:
        return 4.0
    t_rel = relaxation_time(ar)
    return 4.0 + t_rel * (0.5 * np.log(t_rel) + c0 + c_epsilon(eps))


def bound_two_block(ar: AutoRegression, x0, y0, eps, target_chol=None) -> float:
    """Bound for the forward sweep of a two-block target."""
    if ar.target.n_blocks != 2 or not ar.schedule.is_forward(2):
        raise ValueError("bound_two_block requires exactly two blocks and a forward schedule")
    c0 = start_log_distance(ar.target, x0, y0, target_chol)
    if c0 == -np.inf:
        return 5.0
    t_rel = relaxation_time(ar)
    return 5.0 + t_rel * (c0 + c_epsilon(eps))


def whitened_autoregression(ar: AutoRegression, target_chol=None):
    """N = L^{-1} B L."""
    L = ar.target.chol_covariance if target_chol is None else np.asarray(target_chol)
    return linalg.solve_triangular(L, ar.B @ L, lower=True)


def n_star(N, delta, n_cap=10**4, rho=None):
    """Smallest n0 with 1 - ||N^n||^{1/n} >= (1 - rho)/(1 + delta) for every n >= n0.

    Powers are iterated with renormalization. Once some power n1 satisfies
    ||N^{n1}|| <= s^{n1} with s below the threshold, submultiplicativity
    certifies every n >= q0 * n1 for an explicit q0, so only the finite range
    below that point is checked directly.
    """
    N = as_square(N, "N")
    if rho is None:
        rho = float(np.max(np.abs(np.linalg.eigvals(N))))
    if rho >= 1.0:
        raise ValueError("spectral radius must be below one")
    delta = check_positive(delta, "delta")
    log_r = np.log1p(-(1.0 - rho) / (1.0 + delta))
    P = np.eye(N.shape[0])
    log_norm = 0.0
    log_max_prev = 0.0  # max_{j < n} log ||N^j||, with ||N^0|| = 1
    last_bad = 0
    certified_from = np.inf
    n = 0
    while n < n_cap:
        n += 1
        P = P @ N
        s = linalg.svdvals(P)[0]
        if s == 0.0:
            return last_bad + 1
        log_norm += np.log(s)
        P = P / s
        if log_norm > n * log_r:
            last_bad = n
        else:
            log_s = log_norm / n
            if log_s < log_r:
                q0 = max(1, int(np.ceil((n * log_r - log_max_prev) / (n * (log_s - log_r)))))
                certified_from = min(certified_from, q0 * n)
        log_max_prev = max(log_max_prev, log_norm)
        if n + 1 >= certified_from:
            return last_bad + 1
    raise RuntimeError(f"n_star search reached n_cap={n_cap} without a certified tail; partial n_star={last_bad + 1}")


def bound_general(ar: AutoRegression, target_chol, x0, y0, eps, delta, n_cap=10**4):
    """Bound valid for any schedule. Returns ``(bound, n_star)``."""
    t_rel = relaxation_time(ar)
    key = ("general", None if target_chol is None else id(target_chol), float(delta), n_cap)
    if key not in ar._cache:
        N = whitened_autoregression(ar, target_chol)
        lam = float(np.linalg.eigvalsh(N @ N.T).min())
        lam = min(max(lam, 0.0), 1.0 - 1e-16)
        ns = n_star(N, delta, n_cap, rho=ar.spectral_radius())
        ar._cache[key] = (lam, ns)
    lam, ns = ar._cache[key]
    c0 = start_log_distance(ar.target, x0, y0, target_chol)
    if c0 == -np.inf:
        return 4.0, ns
    inner = (1.0 + delta) * t_rel * (-0.5 * np.log1p(-lam) + c0 + c_epsilon(eps))
    return 4.0 + 3.0 * max(ns, inner), ns


def bound_crem_random_design(tau0, tau1, tau2, d1, d2, gamma, C0, Ceps) -> float:
    """Closed-form bound for two-factor crossed designs drawn uniformly among bi-regular graphs."""
    for name, v in (("tau0", tau0), ("tau1", tau1), ("tau2", tau2), ("gamma", gamma)):
        check_positive(v, name)
    dmin = min(d1, d2)
    if dmin <= 4:
        raise ValueError("design degrees must exceed 4")
    return 5.0 + (1.0 + tau0 / min(tau1, tau2)) * (1.0 + 2.0 / np.sqrt(dmin - 2.0) + gamma) * (C0 + Ceps)
