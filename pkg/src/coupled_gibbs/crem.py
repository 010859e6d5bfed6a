"""Gaussian crossed random effects: design, Gibbs sweeps, couplings and exact posterior.

Model: y_n = mu + sum_k a^{(k)}_{i_k[n]} + e_n, e_n ~ N(0, 1/tau_0),
a^{(k)}_i ~ N(0, 1/tau_k), flat prior on mu, p(tau) proportional to tau^{-1/2}.

States are flat vectors laid out as ``[mu, a^(1), ..., a^(K), tau_0, ..., tau_K]``
(see :class:`CremLayout`). Level codes are 0-based in memory and 1-based in CSV
files. All gamma draws use the shape/scale parameterization.
"""

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

from . import _special
from ._validation import check_choice, check_int, check_positive
from .chain import PairKernel, euclidean_distance
from .coupling import max_rejection_coupling, reflection_coupling_diag, rejection_coupling_diag
from .gaussian import GaussianTarget
from .rng import uniform_open

TAU_MODES = ("fixed", "sample")
SHAPE_CONVENTIONS = ("paper", "conjugate")
SAMPLERS = ("collapsed", "vanilla")
EXACT_DIM_CAP = 5000


class CrossedDesign:
    """Observations classified by K crossed factors.

    Parameters
    ----------
    levels : array_like of int, shape (N, K)
        0-based level of each observation for each factor.
    y : array_like, shape (N,)
    sizes : sequence of int, optional
        Number of levels per factor; defaults to ``levels.max(0) + 1``.
        Levels without observations are allowed.
    """

    def __init__(self, levels, y, sizes=None):
        levels = np.asarray(levels)
        if levels.ndim == 1:
            levels = levels[:, None]
        if levels.ndim != 2:
            raise ValueError("levels must be an (N, K) integer array")
        if levels.size and not np.issubdtype(levels.dtype, np.integer):
            if not np.all(levels == np.round(levels)):
                raise ValueError("levels must be integers")
        self.levels = np.ascontiguousarray(levels, dtype=np.int64)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if self.y.shape[0] != self.levels.shape[0]:
            raise ValueError("levels and y must have the same number of rows")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("responses must be finite")
        if sizes is None:
            sizes = self.levels.max(axis=0) + 1 if self.N else np.ones(self.levels.shape[1], dtype=int)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        if self.sizes.shape[0] != self.K or np.any(self.sizes < 1):
            raise ValueError("sizes must give a positive level count per factor")
        if self.N and (self.levels.min() < 0 or np.any(self.levels.max(axis=0) >= self.sizes)):
            raise ValueError("level index out of range")
        self.counts = [np.bincount(self.levels[:, k], minlength=self.sizes[k]).astype(float) for k in range(self.K)]
        self.sum_y = [np.bincount(self.levels[:, k], weights=self.y, minlength=self.sizes[k]) for k in range(self.K)]

    @property
    def N(self) -> int:
        return self.levels.shape[0]

    @property
    def K(self) -> int:
        return self.levels.shape[1]

    def level_means(self, k):
        """Per-level response means (0 for empty levels)."""
        n = self.counts[k]
        return np.divide(self.sum_y[k], n, out=np.zeros_like(n), where=n > 0)

    def pair_counts(self, k, l):
        """Sparse matrix of co-occurrence counts n_ij between levels of factors k and l."""
        data = np.ones(self.N)
        return sparse.csr_matrix(
            (data, (self.levels[:, k], self.levels[:, l])), shape=(self.sizes[k], self.sizes[l])
        )

    def subset(self, mask):
        return CrossedDesign(self.levels[mask], self.y[mask], self.sizes)

    def with_y(self, y):
        return CrossedDesign(self.levels, y, self.sizes)


def design_from_csv(path) -> CrossedDesign:
    """Read a design with header ``y,f1,...,fK`` and 1-based integer level codes."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        K = len(header) - 1
        if K < 1 or header[0] != "y" or header[1:] != [f"f{k + 1}" for k in range(K)]:
            raise ValueError(f"{path}: line 1: expected header y,f1,...,fK, got {','.join(header)}")
        ys, levs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != K + 1:
                raise ValueError(f"{path}: line {lineno}: expected {K + 1} fields, got {len(row)}")
            try:
                yv = float(row[0])
                codes = [int(c) for c in row[1:]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed value in {row}") from None
            if not np.isfinite(yv) or min(codes) < 1:
                raise ValueError(f"{path}: line {lineno}: response must be finite and levels >= 1")
            ys.append(yv)
            levs.append(codes)
    if not ys:
        raise ValueError(f"{path}: no observations")
    return CrossedDesign(np.asarray(levs, dtype=np.int64) - 1, np.asarray(ys))


def design_to_csv(design: CrossedDesign, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y"] + [f"f{k + 1}" for k in range(design.K)])
        for yv, lev in zip(design.y, design.levels):
            w.writerow([repr(float(yv))] + [int(c) + 1 for c in lev])


def regime_probability(regime, K, I):
    check_choice(regime, "regime", (1, 2))
    return 0.1 if regime == 1 else min(1.0, 10.0 / float(I) ** (K - 1))


def _sample_cells(rng, n_cells, p):
    if n_cells <= 10**7:
        return np.flatnonzero(rng.random(n_cells) < p)
    # same law as independent inclusion: binomial count, then distinct cells
    n = rng.binomial(n_cells, p)
    cells = np.unique(rng.integers(0, n_cells, size=n))
    while cells.size < n:
        extra = rng.integers(0, n_cells, size=n - cells.size)
        cells = np.unique(np.concatenate([cells, extra]))
    return cells


def simulate_regime(regime, K, I, tau, rng, mu=0.0, max_attempts=100) -> CrossedDesign:
    """Random crossed design with every K-tuple included independently.

    Regime 1 includes tuples with probability 0.1 and regime 2 with
    probability 10 / I^(K-1). Responses follow the model with precisions
    ``tau`` (a scalar for all of tau_0..tau_K, or a sequence of K + 1 values).
    """
    check_int(K, "K", 1)
    check_int(I, "I", 2)
    taus = _tau_vector(tau, K)
    p = regime_probability(regime, K, I)
    for _ in range(max_attempts):
        cells = _sample_cells(rng, I**K, p)
        if cells.size:
            break
    else:
        raise RuntimeError(f"design simulation produced no observations in {max_attempts} attempts")
    levels = np.stack(np.unravel_index(cells, (I,) * K), axis=1).astype(np.int64)
    effects = [rng.standard_normal(I) / np.sqrt(taus[k + 1]) for k in range(K)]
    eta = mu + sum(effects[k][levels[:, k]] for k in range(K))
    y = eta + rng.standard_normal(cells.size) / np.sqrt(taus[0])
    return CrossedDesign(levels, y, [I] * K)


def _tau_vector(tau, K):
    taus = np.broadcast_to(np.asarray(tau, dtype=float), (K + 1,)).copy()
    if np.any(~np.isfinite(taus)) or np.any(taus <= 0):
        raise ValueError("precisions must be positive and finite")
    return taus


class CremLayout:
    """Index map of the flat state vector."""

    def __init__(self, sizes):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.K = len(self.sizes)
        starts = 1 + np.concatenate([[0], np.cumsum(self.sizes)])
        self.a = [slice(int(starts[k]), int(starts[k + 1])) for k in range(self.K)]
        self.n_effects = int(starts[-1])
        self.tau = slice(self.n_effects, self.n_effects + self.K + 1)
        self.dim = self.n_effects + self.K + 1

    def pack(self, mu, a, tau):
        v = np.empty(self.dim)
        v[0] = mu
        for k in range(self.K):
            v[self.a[k]] = a[k]
        v[self.tau] = tau
        return v


@dataclass
class CremState:
    mu: float
    a: list
    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        if np.any(self.tau <= 0):
            raise ValueError("precisions must be strictly positive")

    def to_vector(self, layout: CremLayout):
        return layout.pack(self.mu, self.a, self.tau)

    @classmethod
    def from_vector(cls, v, layout: CremLayout):
        return cls(float(v[0]), [v[s].copy() for s in layout.a], v[layout.tau].copy())


# Coupled draw helpers -------------------------------------------------------
# ``means``/``sds``/``shapes``/``scales`` are lists with one entry per chain;
# a single entry means an uncoupled draw.


def _gauss(means, sds, rng, mode):
    if len(means) == 1:
        m, s = means[0], sds[0]
        return [m + s * rng.standard_normal(np.shape(m))], True
    mx, my = means
    sx, sy = sds
    if mode == "contractive":
        z = rng.standard_normal(np.shape(mx))
        x, y = mx + sx * z, my + sy * z
        return [x, y], bool(np.array_equal(x, y))
    if np.array_equal(sx, sy):
        x, y, met = reflection_coupling_diag(mx, my, sx, rng)
    else:
        x, y, met = rejection_coupling_diag(mx, sx, my, sy, rng)
    if np.ndim(mx) == 0:
        x, y = float(x[0]), float(y[0])
    return [x, y], met


def _gamma(shapes, scales, rng, mode):
    if len(shapes) == 1:
        return [float(_special.gamma_ppf(uniform_open(rng), shapes[0], scales[0]))], True
    (ax, ay), (bx, by) = shapes, scales
    if mode == "contractive":
        u = uniform_open(rng)
        x, y = float(_special.gamma_ppf(u, ax, bx)), float(_special.gamma_ppf(u, ay, by))
        return [x, y], x == y
    draw = max_rejection_coupling(
        lambda r: float(_special.gamma_ppf(uniform_open(r), ax, bx)),
        lambda v: float(_special.gamma_logpdf(v, ax, bx)),
        lambda r: float(_special.gamma_ppf(uniform_open(r), ay, by)),
        lambda v: float(_special.gamma_logpdf(v, ay, by)),
        rng,
    )
    return [draw.x, draw.y], draw.met


class CremModel:
    """Gaussian crossed random effects posterior with its Gibbs samplers.

    Parameters
    ----------
    design : CrossedDesign
    tau : float or sequence
        Precisions (tau_0, ..., tau_K). Used as fixed values when
        ``tau_mode == "fixed"``; ignored otherwise except for defaults.
    tau_mode : {"fixed", "sample"}
    sampler : {"collapsed", "vanilla"}
    tau_shape_convention : {"paper", "conjugate"}
        Gamma shape (count - 1)/2 or (count + 1)/2 in the precision updates.
    """

    def __init__(self, design: CrossedDesign, tau=1.0, tau_mode="fixed", sampler="collapsed", tau_shape_convention="paper"):
        self.design = design
        self.tau = _tau_vector(tau, design.K)
        self.tau_mode = check_choice(tau_mode, "tau_mode", TAU_MODES)
        self.sampler = check_choice(sampler, "sampler", SAMPLERS)
        self.convention = check_choice(tau_shape_convention, "tau_shape_convention", SHAPE_CONVENTIONS)
        if design.N == 0:
            raise ValueError("design has no observations")
        self.layout = CremLayout(design.sizes)
        self._levels = [np.ascontiguousarray(design.levels[:, k]) for k in range(design.K)]

    # --- helpers -----------------------------------------------------------
    def _shape(self, count):
        shape = 0.5 * (count - 1) if self.convention == "paper" else 0.5 * (count + 1)
        if shape <= 0:
            raise ValueError("degenerate scale draw: gamma shape is not positive")
        return shape

    def _fitted_except(self, v, k):
        eta = np.zeros(self.design.N)
        for l in range(self.design.K):
            if l != k:
                eta += v[self.layout.a[l]][self._levels[l]]
        return eta

    def _residual_sums(self, v, k):
        """sum over observations in each level of k of (y - sum_{l != k} a^{(l)})."""
        cross = np.bincount(self._levels[k], weights=self._fitted_except(v, k), minlength=self.design.sizes[k])
        return self.design.sum_y[k] - cross

    def _collapsed_mu_params(self, v, k):
        tau0, tauk = v[self.layout.tau][0], v[self.layout.tau][k + 1]
        n = self.design.counts[k]
        r = self._residual_sums(v, k)
        denom = tauk + n * tau0
        s = n * tau0 / denom
        ssum = s.sum()
        mean = float(np.sum(tau0 * r / denom) / ssum)
        sd = 1.0 / np.sqrt(tauk * ssum)
        return mean, sd, r

    def _effect_params(self, v, k, mu, r):
        tau0, tauk = v[self.layout.tau][0], v[self.layout.tau][k + 1]
        n = self.design.counts[k]
        prec = n * tau0 + tauk
        mean = tau0 * (r - n * mu) / prec
        return mean, 1.0 / np.sqrt(prec)

    def _tauk_params(self, v, k):
        ss = float(np.sum(v[self.layout.a[k]] ** 2))
        if ss <= 0:
            raise ValueError("degenerate scale draw: effects sum of squares is zero")
        return self._shape(self.design.sizes[k]), 2.0 / ss

    def _tau0_params(self, v):
        # p(tau_0) ~ tau_0^{-1/2} and N Gaussian residuals give a gamma law with
        # rate RSS/2 and shape (N+1)/2; the "paper" family lowers the shape by one.
        resid = self.design.y - v[0] - self._fitted_except(v, -1)
        rss = float(resid @ resid)
        if rss <= 0:
            raise ValueError("degenerate scale draw: residual sum of squares is zero")
        return self._shape(self.design.N), 2.0 / rss

    # --- sweeps ------------------------------------------------------------
    def _sweep(self, states, rng, mode):
        """Advance one chain (``len(states) == 1``) or a coupled pair in place."""
        lay = self.layout
        K = self.design.K
        sample_tau = self.tau_mode == "sample"
        pair = len(states) > 1
        if self.sampler == "collapsed":
            for k in range(K):
                params = [self._collapsed_mu_params(v, k) for v in states]
                mus, _ = _gauss([p[0] for p in params], [p[1] for p in params], rng, mode)
                for v, mu in zip(states, mus):
                    v[0] = mu
                eff = [self._effect_params(v, k, v[0], p[2]) for v, p in zip(states, params)]
                draws, _ = _gauss([e[0] for e in eff], [e[1] for e in eff], rng, mode)
                for v, a in zip(states, draws):
                    v[lay.a[k]] = a
                if sample_tau:
                    self._draw_tau(states, k + 1, [self._tauk_params(v, k) for v in states], rng, mode)
        else:
            params = []
            for v in states:
                resid = self.design.y - self._fitted_except(v, -1)
                params.append((float(resid.mean()), 1.0 / np.sqrt(self.design.N * v[lay.tau][0])))
            mus, _ = _gauss([p[0] for p in params], [p[1] for p in params], rng, mode)
            for v, mu in zip(states, mus):
                v[0] = mu
            for k in range(K):
                eff = [self._effect_params(v, k, v[0], self._residual_sums(v, k)) for v in states]
                draws, _ = _gauss([e[0] for e in eff], [e[1] for e in eff], rng, mode)
                for v, a in zip(states, draws):
                    v[lay.a[k]] = a
            if sample_tau:
                for k in range(K):
                    self._draw_tau(states, k + 1, [self._tauk_params(v, k) for v in states], rng, mode)
        if sample_tau:
            self._draw_tau(states, 0, [self._tau0_params(v) for v in states], rng, mode)
        if pair:
            return bool(np.array_equal(states[0], states[1]))
        return True

    def _draw_tau(self, states, idx, params, rng, mode):
        vals, _ = _gamma([p[0] for p in params], [p[1] for p in params], rng, mode)
        for v, t in zip(states, vals):
            v[self.layout.n_effects + idx] = t

    def single_step(self, v, rng):
        v = np.array(v, dtype=float)
        self._sweep([v], rng, None)
        return v

    def coupled_step(self, vx, vy, rng, mode):
        vx, vy = np.array(vx, dtype=float), np.array(vy, dtype=float)
        met = self._sweep([vx, vy], rng, mode)
        return vx, vy, met

    def pair_kernel(self) -> PairKernel:
        return PairKernel(
            contractive_step=lambda x, y, rng: self.coupled_step(x, y, rng, "contractive")[:2],
            maximal_step=lambda x, y, rng: self.coupled_step(x, y, rng, "maximal"),
            single_step=self.single_step,
            distance=euclidean_distance,
        )

    def default_eps(self):
        """Euclidean threshold 1 / (K * I) with I the largest factor size."""
        return 1.0 / (self.design.K * float(np.max(self.design.sizes)))

    def sample_initial(self, rng):
        """Initial law: N(0, 1) intercept and effects; tau fixed, or Gamma(1, 1) when sampled."""
        v = np.empty(self.layout.dim)
        v[: self.layout.n_effects] = rng.standard_normal(self.layout.n_effects)
        if self.tau_mode == "fixed":
            v[self.layout.tau] = self.tau
        else:
            v[self.layout.tau] = rng.gamma(1.0, 1.0, size=self.design.K + 1)
        return v

    def state(self, v) -> CremState:
        return CremState.from_vector(v, self.layout)

    # --- exact posterior (fixed tau) ------------------------------------------
    def posterior_precision(self):
        """Dense precision and linear term of (mu, a) given fixed tau."""
        d = self.layout.n_effects
        if d > EXACT_DIM_CAP:
            raise ValueError(f"dimension {d} exceeds the dense cap {EXACT_DIM_CAP}")
        des = self.design
        cols = [np.zeros(des.N, dtype=np.int64)] + [1 + int(np.sum(des.sizes[:k])) + des.levels[:, k] for k in range(des.K)]
        rows = np.repeat(np.arange(des.N), des.K + 1)
        X = sparse.csr_matrix((np.ones(des.N * (des.K + 1)), (rows, np.stack(cols, 1).ravel())), shape=(des.N, d))
        tau0 = self.tau[0]
        P = tau0 * (X.T @ X).toarray()
        prior = np.concatenate([[0.0]] + [np.full(des.sizes[k], self.tau[k + 1]) for k in range(des.K)])
        P[np.diag_indices(d)] += prior
        h = tau0 * (X.T @ des.y)
        return P, h

    def exact_posterior(self):
        """Posterior mean and covariance of (mu, a) with fixed tau."""
        P, h = self.posterior_precision()
        try:
            c = linalg.cholesky(P, lower=True)
        except linalg.LinAlgError:
            raise ValueError("flat direction: posterior precision is singular") from None
        mean = linalg.cho_solve((c, True), h)
        cov = linalg.cho_solve((c, True), np.eye(P.shape[0]))
        return mean, 0.5 * (cov + cov.T)

    def gaussian_target(self):
        """Fixed-tau posterior as a block Gaussian matching the chosen sampler.

        The collapsed sampler is a blocked Gibbs sampler on the effects with the
        intercept integrated out; the vanilla sampler updates (mu, a^(1), ...).
        """
        P, h = self.posterior_precision()
        mean = np.linalg.solve(P, h)
        if self.sampler == "vanilla":
            return GaussianTarget(mean, P, [1] + [int(s) for s in self.design.sizes])
        Pa = P[1:, 1:] - np.outer(P[1:, 0], P[0, 1:]) / P[0, 0]
        return GaussianTarget(mean[1:], Pa, [int(s) for s in self.design.sizes])

    def target_coordinates(self, v):
        """Coordinates of a state in the space of :meth:`gaussian_target`."""
        v = np.asarray(v)
        return v[1 : self.layout.n_effects] if self.sampler == "collapsed" else v[: self.layout.n_effects]


def exact_posterior(design, tau_fixed):
    """Posterior mean and covariance of (mu, a) for fixed precisions."""
    return CremModel(design, tau_fixed).exact_posterior()


def collapsed_sweep(state, design, rng, tau_mode="fixed", tau=None, tau_shape_convention="paper"):
    model = CremModel(design, state.tau if tau is None else tau, tau_mode, "collapsed", tau_shape_convention)
    return model.state(model.single_step(state.to_vector(model.layout), rng))


def vanilla_sweep(state, design, rng, tau_mode="fixed", tau=None, tau_shape_convention="paper"):
    model = CremModel(design, state.tau if tau is None else tau, tau_mode, "vanilla", tau_shape_convention)
    return model.state(model.single_step(state.to_vector(model.layout), rng))


def coupled_sweep(state_x, state_y, design, rng, mode, tau_mode="fixed", sampler="collapsed", tau_shape_convention="paper"):
    check_choice(mode, "mode", ("contractive", "maximal"))
    model = CremModel(design, state_x.tau, tau_mode, sampler, tau_shape_convention)
    vx, vy, met = model.coupled_step(state_x.to_vector(model.layout), state_y.to_vector(model.layout), rng, mode)
    return model.state(vx), model.state(vy), met
