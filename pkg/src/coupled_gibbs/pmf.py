"""Probabilistic matrix factorization: vanilla and locally centred blocked Gibbs samplers.

Model: y_n ~ N(rho u_{i[n]}^T v_{j[n]}, 1/tau_0), u_i, v_j ~ N(0, I_d),
tau_0 ~ Gamma(c, scale d_scale) and rho^{-2} ~ Gamma(a, scale b). The vanilla
sampler uses the improper prior p(rho) proportional to 1 on (0, inf) instead,
which makes the rho update a truncated Gaussian.

States are flat vectors ``[u (I1*d, row major), v (I2*d), rho, tau_0]``.
Indices are 0-based in memory and 1-based in CSV files.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import svds

from . import _special
from ._validation import check_choice, check_int, check_positive
from .chain import PairKernel, euclidean_distance
from .coupling import GaussianPair, max_reflection_coupling, max_rejection_coupling
from .crem import _gamma, regime_probability, _sample_cells
from .rng import uniform_open

SAMPLERS = ("vanilla", "local_centering")


class PmfData:
    """Rating triples (i, j, y) with 0-based indices."""

    def __init__(self, i, j, y, I1=None, I2=None, d=1, a=1.0, b=1.0, c=1.0, d_scale=1.0):
        self.i = np.asarray(i, dtype=np.int64).reshape(-1)
        self.j = np.asarray(j, dtype=np.int64).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if not (self.i.shape == self.j.shape == self.y.shape):
            raise ValueError("i, j and y must have equal length")
        if self.N == 0:
            raise ValueError("no observations")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("responses must be finite")
        self.I1 = int(self.i.max() + 1 if I1 is None else I1)
        self.I2 = int(self.j.max() + 1 if I2 is None else I2)
        if self.i.min() < 0 or self.j.min() < 0 or self.i.max() >= self.I1 or self.j.max() >= self.I2:
            raise ValueError("index out of range")
        self.d = check_int(d, "d", 1)
        self.a = check_positive(a, "a")
        self.b = check_positive(b, "b")
        self.c = check_positive(c, "c")
        self.d_scale = check_positive(d_scale, "d_scale")
        self.user_counts = np.bincount(self.i, minlength=self.I1)
        self.item_counts = np.bincount(self.j, minlength=self.I2)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    def hyper(self):
        return {"a": self.a, "b": self.b, "c": self.c, "d_scale": self.d_scale}


def pmf_from_csv(path, **hyper) -> PmfData:
    """Read triples from a CSV with header ``i,j,y`` and 1-based indices."""
    rows_i, rows_j, rows_y = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["i", "j", "y"]:
            raise ValueError(f"{path}: line 1: expected header i,j,y")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                iv, jv, yv = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed value in {row}") from None
            if iv < 1 or jv < 1 or not np.isfinite(yv):
                raise ValueError(f"{path}: line {lineno}: indices must be >= 1 and y finite")
            rows_i.append(iv - 1)
            rows_j.append(jv - 1)
            rows_y.append(yv)
    return PmfData(rows_i, rows_j, rows_y, **hyper)


def pmf_to_csv(data: PmfData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "y"])
        for a, b, c in zip(data.i, data.j, data.y):
            w.writerow([int(a) + 1, int(b) + 1, repr(float(c))])


def simulate_pmf(regime, I, rng, d=1, rho=1.0, tau0=1.0, **hyper) -> PmfData:
    """Ratings on an I x I grid with cells included as in the crossed-design regimes."""
    p = regime_probability(regime, 2, I)
    for _ in range(100):
        cells = _sample_cells(rng, I * I, p)
        if cells.size:
            break
    else:
        raise RuntimeError("simulation produced no observations")
    i, j = np.unravel_index(cells, (I, I))
    u = rng.standard_normal((I, d))
    v = rng.standard_normal((I, d))
    y = rho * np.einsum("nd,nd->n", u[i], v[j]) + rng.standard_normal(cells.size) / np.sqrt(tau0)
    return PmfData(i, j, y, I, I, d, **hyper)


@dataclass
class PmfState:
    u: np.ndarray
    v: np.ndarray
    rho: float
    tau0: float

    def __post_init__(self):
        if not (self.rho > 0 and self.tau0 > 0):
            raise ValueError("rho and tau0 must be positive")


class RowGaussians:
    """Independent Gaussian rows N(mean_i, P_i^{-1}), stored as P_i = R_i R_i^T."""

    def __init__(self, mean, prec):
        self.mean = mean
        try:
            self.R = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            raise ValueError("row precision is not positive definite") from None

    def from_standard(self, z):
        # x = mean + R^{-T} z
        RT = np.swapaxes(self.R, 1, 2)
        return self.mean + np.linalg.solve(RT, z[..., None])[..., 0]

    def standardize(self, diff):
        return np.einsum("nji,nj->ni", self.R, diff)

    def logpdf(self, x):
        w = self.standardize(x - self.mean)
        logdet = np.sum(np.log(np.diagonal(self.R, axis1=1, axis2=2)))
        return float(-0.5 * np.sum(w * w) + logdet)

    def same_covariance(self, other):
        return np.array_equal(self.R, other.R)


def _row_draw(laws, rng, mode):
    shape = laws[0].mean.shape
    if len(laws) == 1:
        return [laws[0].from_standard(rng.standard_normal(shape))]
    lx, ly = laws
    if mode == "contractive":
        z = rng.standard_normal(shape)
        return [lx.from_standard(z), ly.from_standard(z)]
    if lx.same_covariance(ly):
        # reflection in the standardized coordinates of the shared covariance
        zx = lx.standardize(lx.mean)
        zy = lx.standardize(ly.mean)
        draw = max_reflection_coupling(GaussianPair(zx.ravel(), zy.ravel(), np.ones(zx.size)), rng)
        if draw.met:
            x = lx.from_standard(draw.x.reshape(shape) - zx)
            return [x, x.copy()]
        return [lx.from_standard(draw.x.reshape(shape) - zx), ly.from_standard(draw.y.reshape(shape) - zy)]
    draw = max_rejection_coupling(
        lambda r: lx.from_standard(r.standard_normal(shape)),
        lx.logpdf,
        lambda r: ly.from_standard(r.standard_normal(shape)),
        ly.logpdf,
        rng,
    )
    return [draw.x, draw.y]


def _truncnorm_draw(params, rng, mode):
    if len(params) == 1:
        m, s = params[0]
        return [float(_special.truncnorm_lower_rvs(rng, m, s))]
    (mx, sx), (my, sy) = params
    if mode == "contractive":
        u = uniform_open(rng)
        return [float(_special.truncnorm_lower_ppf(u, mx, sx)), float(_special.truncnorm_lower_ppf(u, my, sy))]
    draw = max_rejection_coupling(
        lambda r: float(_special.truncnorm_lower_rvs(r, mx, sx)),
        lambda v: float(_special.truncnorm_lower_logpdf(v, mx, sx)),
        lambda r: float(_special.truncnorm_lower_rvs(r, my, sy)),
        lambda v: float(_special.truncnorm_lower_logpdf(v, my, sy)),
        rng,
    )
    return [draw.x, draw.y]


class PmfModel:
    """PMF posterior with its vanilla or locally centred blocked Gibbs sampler."""

    def __init__(self, data: PmfData, sampler="local_centering", init_sd=0.1):
        self.data = data
        self.init_sd = float(init_sd)
        self._warm = None
        if not (self.init_sd >= 0 and np.isfinite(self.init_sd)):
            raise ValueError("init_sd must be finite and >= 0")
        self.sampler = check_choice(sampler, "sampler", SAMPLERS)
        d = data.d
        self.nu = data.I1 * d
        self.nv = data.I2 * d
        self.dim = self.nu + self.nv + 2
        self.rho_idx = self.nu + self.nv
        self.tau_idx = self.rho_idx + 1
        self._eye = np.eye(d)

    # --- layout --------------------------------------------------------------
    def unpack(self, v):
        d = self.data.d
        return (v[: self.nu].reshape(self.data.I1, d), v[self.nu : self.rho_idx].reshape(self.data.I2, d),
                float(v[self.rho_idx]), float(v[self.tau_idx]))

    def pack(self, u, w, rho, tau0):
        return np.concatenate([np.ravel(u), np.ravel(w), [rho, tau0]])

    def state(self, v) -> PmfState:
        u, w, rho, tau0 = self.unpack(v)
        return PmfState(u.copy(), w.copy(), rho, tau0)

    # --- conditionals ----------------------------------------------------------
    def _gram(self, side, other):
        """Per-row sum of other-factor outer products and of other-factor * y."""
        dat = self.data
        idx, oidx, n_rows = (dat.i, dat.j, dat.I1) if side == "u" else (dat.j, dat.i, dat.I2)
        o = other[oidx]
        d = dat.d
        outer = (o[:, :, None] * o[:, None, :]).reshape(-1, d * d)
        G = np.stack([np.bincount(idx, weights=outer[:, p], minlength=n_rows) for p in range(d * d)], 1)
        h = np.stack([np.bincount(idx, weights=o[:, p] * dat.y, minlength=n_rows) for p in range(d)], 1)
        return G.reshape(n_rows, d, d), h

    def _row_law(self, side, other, rho, tau0, centred):
        G, h = self._gram(side, other)
        if centred:
            # ubar_i | rho, v, tau0 ~ N(P^{-1} tau0 sum v y, P^{-1}), P = rho^{-2} I + tau0 sum v v^T
            prec = self._eye / rho**2 + tau0 * G
            lin = tau0 * h
        else:
            # u_i | rho, v, tau0 ~ N(Q^{-1} tau0 rho sum v y, Q^{-1}), Q = I + tau0 rho^2 sum v v^T
            prec = self._eye + tau0 * rho**2 * G
            lin = tau0 * rho * h
        mean = np.linalg.solve(prec, lin[..., None])[..., 0]
        return RowGaussians(mean, prec)

    def rho_gamma_params(self, scaled_rows):
        """Shape and scale of rho^{-2} given the centred rows (shape a + d I / 2)."""
        n_rows = scaled_rows.shape[0]
        shape = self.data.a + self.data.d * n_rows / 2.0
        rate = 1.0 / self.data.b + 0.5 * float(np.sum(scaled_rows**2))
        return shape, 1.0 / rate

    def rho_truncnorm_params(self, u, w, tau0):
        dat = self.data
        f = np.einsum("nd,nd->n", u[dat.i], w[dat.j])
        ss = float(f @ f)
        if ss <= 0:
            raise ValueError("degenerate scale conditional: all u^T v are zero")
        return float(f @ dat.y) / ss, 1.0 / np.sqrt(tau0 * ss)

    def tau0_params(self, u, w, rho):
        dat = self.data
        r = dat.y - rho * np.einsum("nd,nd->n", u[dat.i], w[dat.j])
        return dat.c + dat.N / 2.0, 1.0 / (1.0 / dat.d_scale + 0.5 * float(r @ r))

    # --- sweeps ------------------------------------------------------------------
    def _sweep(self, vecs, rng, mode, force_rho=False):
        parts = [list(self.unpack(v)) for v in vecs]  # [u, w, rho, tau0]
        if self.sampler == "local_centering":
            for side in (0, 1):
                other = 1 - side
                if not force_rho:
                    params = [self.rho_gamma_params(p[2] * p[side]) for p in parts]
                    lams, _ = _gamma([q[0] for q in params], [q[1] for q in params], rng, mode)
                    for p, lam in zip(parts, lams):
                        p[2] = lam**-0.5
                laws = [self._row_law("u" if side == 0 else "v", p[other], p[2], p[3], True) for p in parts]
                rows = _row_draw(laws, rng, mode)
                for p, r in zip(parts, rows):
                    p[side] = r / p[2]
        else:
            for side in (0, 1):
                other = 1 - side
                laws = [self._row_law("u" if side == 0 else "v", p[other], p[2], p[3], False) for p in parts]
                rows = _row_draw(laws, rng, mode)
                for p, r in zip(parts, rows):
                    p[side] = r
            if not force_rho:
                params = [self.rho_truncnorm_params(p[0], p[1], p[3]) for p in parts]
                rhos = _truncnorm_draw(params, rng, mode)
                for p, r in zip(parts, rhos):
                    p[2] = r
        params = [self.tau0_params(p[0], p[1], p[2]) for p in parts]
        taus, _ = _gamma([q[0] for q in params], [q[1] for q in params], rng, mode)
        for p, t in zip(parts, taus):
            p[3] = t
        return [self.pack(*p) for p in parts]

    def single_step(self, v, rng):
        return self._sweep([np.asarray(v, dtype=float)], rng, None)[0]

    def coupled_step(self, vx, vy, rng, mode):
        x, y = self._sweep([np.asarray(vx, dtype=float), np.asarray(vy, dtype=float)], rng, mode)
        return x, y, bool(np.array_equal(x, y))

    def pair_kernel(self) -> PairKernel:
        return PairKernel(
            contractive_step=lambda x, y, rng: self.coupled_step(x, y, rng, "contractive")[:2],
            maximal_step=lambda x, y, rng: self.coupled_step(x, y, rng, "maximal"),
            single_step=self.single_step,
            distance=euclidean_distance,
        )

    def default_eps(self):
        return 1.0 / (2.0 * max(self.data.I1, self.data.I2))

    def warm_start(self, n_iter=50):
        """Ridge alternating least squares fit (u_hat, v_hat) with sum(u_hat) >= 0.

        ALS starts from the rank-d truncated SVD of the zero-filled rating
        matrix (ALS from a flat start often stalls in partially sign-flipped
        local optima) and uses the unit prior precision as ridge penalty.
        Both chains of a coupled pair share this deterministic point, which
        fixes the sign orientation of the fit.
        """
        if self._warm is None:
            dat = self.data
            Y = sparse.csr_matrix((dat.y, (dat.i, dat.j)), shape=(dat.I1, dat.I2))
            if dat.d < min(dat.I1, dat.I2):
                left, sv, right = svds(Y, k=dat.d, v0=np.ones(min(dat.I1, dat.I2)))
            else:
                left, sv, right = np.linalg.svd(Y.toarray(), full_matrices=False)
                left, sv, right = left[:, : dat.d], sv[: dat.d], right[: dat.d]
            w = right.T * np.sqrt(sv)
            u = left * np.sqrt(sv)
            for _ in range(n_iter):
                G, h = self._gram("u", w)
                u = np.linalg.solve(self._eye + G, h[..., None])[..., 0]
                G, h = self._gram("v", u)
                w = np.linalg.solve(self._eye + G, h[..., None])[..., 0]
            sign = np.where(u.sum(0) < 0, -1.0, 1.0)
            self._warm = (u * sign, w * sign)
        return self._warm

    def sample_initial(self, rng):
        """Initial law around the warm start.

        Factors are the ALS fit plus N(0, init_sd^2) jitter, rho is
        exp(init_sd * N(0, 1)) and tau_0 is the inverse residual variance of
        the fit times exp(init_sd * N(0, 1)). The posterior is symmetric under
        (u, v) -> (-u, -v) and has further partially flipped modes on sparse
        designs; prior-centred starts put the two chains in different modes
        with positive probability.
        """
        dat = self.data
        uh, wh = self.warm_start()
        r = dat.y - np.einsum("nd,nd->n", uh[dat.i], wh[dat.j])
        tau_hat = dat.N / max(float(r @ r), 1e-12 * dat.N)
        jit = self.init_sd * rng.standard_normal(2)
        u = uh + self.init_sd * rng.standard_normal(uh.shape)
        w = wh + self.init_sd * rng.standard_normal(wh.shape)
        return self.pack(u, w, float(np.exp(jit[0])), float(tau_hat * np.exp(jit[1])))

    # --- identifiable summaries -------------------------------------------------
    def fitted(self, v, i, j):
        u, w, rho, _ = self.unpack(v)
        return rho * float(u[i] @ w[j])

    def test_functions(self, pairs=((0, 0),)):
        out = {f"fit_{i + 1}_{j + 1}": (lambda v, i=i, j=j: self.fitted(v, i, j)) for i, j in pairs}
        out["tau0"] = lambda v: float(v[self.tau_idx])
        out["scaled_norm_u"] = lambda v: float(v[self.rho_idx] ** 2 * np.sum(v[: self.nu] ** 2))
        return out


def local_centering_sweep(state: PmfState, data: PmfData, rng) -> PmfState:
    model = PmfModel(data, "local_centering")
    return model.state(model.single_step(model.pack(state.u, state.v, state.rho, state.tau0), rng))


def vanilla_sweep(state: PmfState, data: PmfData, rng) -> PmfState:
    model = PmfModel(data, "vanilla")
    return model.state(model.single_step(model.pack(state.u, state.v, state.rho, state.tau0), rng))


def coupled_pmf_sweep(state_x: PmfState, state_y: PmfState, data: PmfData, rng, mode, sampler="local_centering"):
    check_choice(mode, "mode", ("contractive", "maximal"))
    model = PmfModel(data, sampler)
    vx = model.pack(state_x.u, state_x.v, state_x.rho, state_x.tau0)
    vy = model.pack(state_y.u, state_y.v, state_y.rho, state_y.tau0)
    x, y, met = model.coupled_step(vx, vy, rng, mode)
    return model.state(x), model.state(y), met
