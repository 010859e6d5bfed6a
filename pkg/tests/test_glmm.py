import numpy as np
import pytest
from scipy import integrate, stats

from coupled_gibbs.chain import init_offset_pair, run_one_step, run_two_step
from coupled_gibbs.crem import CremModel, CrossedDesign, simulate_regime
from coupled_gibbs.glmm import (
    MH_VARIANTS,
    GaussianResponse,
    GlmmModel,
    LaplaceResponse,
    _mh_pair,
    _mh_single,
    coupled_glmm_sweep,
    coupled_mh_block,
    laplace_benchmark_kernel,
    laplace_benchmark_run,
    laplace_log_target,
    make_family,
    mwg_local_centering_sweep,
    simulate_glmm,
)

SQRT2 = np.sqrt(2.0)


def batch_means(x, n_batches=50):
    x = np.asarray(x)
    b = x[: len(x) // n_batches * n_batches].reshape(n_batches, -1, *x.shape[1:]).mean(1)
    return b.mean(0), b.std(0, ddof=1) / np.sqrt(n_batches)


# --- families ------------------------------------------------------------------


def test_families():
    assert make_family("laplace").scale == pytest.approx(1 / SQRT2)
    assert make_family("laplace", 1.0).scale == 1.0
    assert make_family("gaussian", tau0=2.0).tau0 == 2.0
    with pytest.raises(ValueError):
        make_family("logit")
    with pytest.raises(ValueError):
        make_family("laplace", -1.0)
    lap = LaplaceResponse(2.0)
    assert lap.loglik(1.0, 3.0) == pytest.approx(-1.0)
    assert GaussianResponse(4.0).loglik(1.0, 0.5) == pytest.approx(-0.5)


# --- coupled MH on a product target ------------------------------------------------


@pytest.mark.parametrize("variant", MH_VARIANTS)
def test_mh_block_equal_inputs_meet(variant, rng):
    lt = laplace_log_target(1.0)
    xs = rng.laplace(size=6)
    for _ in range(10):
        nx, ny, met = coupled_mh_block(xs, xs.copy(), variant, SQRT2, rng, lt)
        assert met.all() and np.array_equal(nx, ny)
        xs = nx


def test_mh_block_validation(rng):
    lt = laplace_log_target()
    with pytest.raises(ValueError):
        coupled_mh_block(np.zeros(2), np.zeros(3), "fully_factorized_maximal", 1.0, rng, lt)
    with pytest.raises(ValueError):
        coupled_mh_block(np.zeros(2), np.zeros(2), "maximal", 1.0, rng, lt)
    with pytest.raises(ValueError, match="non-finite"):
        coupled_mh_block(np.zeros(2), np.ones(2), "fully_factorized_maximal", 1.0, rng, lambda x: np.full(x.shape, np.nan))


@pytest.mark.parametrize("variant", MH_VARIANTS)
def test_synchronous_acceptance_marginals(variant):
    """X-marginal moves and acceptance rates of the coupled step equal the solo kernel's."""
    rng = np.random.default_rng(7)
    lt = laplace_log_target(1.0)
    xs, ys = np.array([0.0, 1.5, -2.0]), np.array([0.4, -1.0, -2.1])
    lx, ly = lt(xs), lt(ys)
    n = 20_000
    cx, cacc, sx, sacc = [], [], [], []
    for _ in range(n):
        nx, _, _, _, acc = _mh_pair(xs, ys, lx, ly, variant, SQRT2, rng, lt, lt)
        cx.append(nx)
        cacc.append(acc)
        ox, _, oacc = _mh_single(xs, lx, variant, SQRT2, rng, lt)
        sx.append(ox)
        sacc.append(oacc)
    for a, b in ((cacc, sacc), (cx, sx), (np.square(cx), np.square(sx))):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        se = np.sqrt(a.var(0, ddof=1) / n + b.var(0, ddof=1) / n)
        assert np.all(np.abs(a.mean(0) - b.mean(0)) <= 4 * se + 1e-12)


@pytest.mark.parametrize("variant", ["blocked_maximal", "fully_factorized_reflection"])
def test_mh_kernel_preserves_laplace(variant):
    # 10^6 independent chains started at the target, 20 steps, binned chi-square at the 1% level
    rng = np.random.default_rng(11)
    lt = laplace_log_target(1.0)
    x = rng.laplace(size=10**6)
    lx = lt(x)
    for _ in range(20):
        x, lx, _ = _mh_single(x, lx, "fully_factorized_maximal" if variant.startswith("fully") else "blocked_factorized_maximal", SQRT2, rng, lt)
    edges = np.concatenate([[-np.inf], np.linspace(-5, 5, 41), [np.inf]])
    probs = np.diff(stats.laplace.cdf(edges))
    counts = np.histogram(x, edges)[0]
    chi2 = np.sum((counts - x.size * probs) ** 2 / (x.size * probs))
    assert chi2 <= stats.chi2.ppf(0.99, len(probs) - 1)


def test_benchmark_run_and_kernel(rng):
    T, truncated, fractions = laplace_benchmark_run(3, "fully_factorized_maximal", rng, max_iter=5000)
    assert not truncated and fractions[-1] == 0.0 and len(fractions) == T
    T, truncated, fractions = laplace_benchmark_run(50, "blocked_maximal", np.random.default_rng(0), max_iter=3)
    assert truncated and T == 3
    pk = laplace_benchmark_kernel(4, "blocked_reflection")
    x = rng.laplace(size=4)
    nx, ny, met = pk.maximal_step(x, x.copy(), rng)
    assert met
    assert pk.single_step(x, rng).shape == (4,)


def test_fully_factorized_meeting_time_grows_slowly():
    dims = [3, 10, 30, 100, 300]
    means = []
    for d in dims:
        rng = np.random.default_rng(d)
        means.append(np.mean([laplace_benchmark_run(d, "fully_factorized_maximal", rng, 10**4)[0] for _ in range(40)]))
    slope = np.polyfit(np.log(np.log(dims)), np.log(means), 1)[0]
    assert slope <= 2.0


# --- MwG sampler ---------------------------------------------------------------------


def tiny_laplace_design():
    # K = 1, two levels, four observations
    return CrossedDesign([[0], [0], [1], [1]], [0.3, 1.4, -0.8, -0.2], [2])


def test_reparametrization_roundtrip(rng):
    m = GlmmModel(simulate_glmm(1, 2, 10, 1.0, LaplaceResponse(1.0), rng), LaplaceResponse(1.0))
    v = m.sample_initial(rng)
    for k in range(2):
        sl = m.layout.a[k]
        xi = v[0] + v[sl]
        np.testing.assert_allclose(xi - v[0], v[sl], rtol=0, atol=1e-14)


def test_laplace_tiny_instance_matches_quadrature():
    """Posterior of (xi_1, xi_2) for K = 1 with mu integrated out, by 2-d quadrature."""
    des = tiny_laplace_design()
    tau1, b = 1.3, 1.0
    y = des.y

    def dens(x1, x2):
        ll = -(np.abs(y[0] - x1) + np.abs(y[1] - x1) + np.abs(y[2] - x2) + np.abs(y[3] - x2)) / b
        return np.exp(ll - 0.25 * tau1 * (x1 - x2) ** 2)

    # tensor Simpson rule; the grid contains the kink points y_n
    grid = np.linspace(-12.0, 12.0, 2401)
    assert all(np.isclose(grid, v).any() for v in y)
    X1, X2 = np.meshgrid(grid, grid, indexing="ij")
    w = integrate.simpson(integrate.simpson(dens(X1, X2), x=grid, axis=1), x=grid)
    mom = lambda f: integrate.simpson(integrate.simpson(f * dens(X1, X2), x=grid, axis=1), x=grid) / w
    m1, m2, s1 = mom(X1), mom(X2), mom(X1**2)

    rng = np.random.default_rng(3)
    m = GlmmModel(des, LaplaceResponse(b), tau=[1.0, tau1], S=2)
    v = m.sample_initial(rng)
    n = 60_000
    xi = np.empty((n, 2))
    for t in range(n):
        v = mwg_local_centering_sweep(v, m, rng)
        xi[t] = v[0] + v[m.layout.a[0]]
    mean, se = batch_means(xi)
    assert abs(mean[0] - m1) <= 4 * se[0] and abs(mean[1] - m2) <= 4 * se[1]
    sq, sq_se = batch_means(xi[:, 0] ** 2)
    assert abs(sq - s1) <= 4 * sq_se


def test_gaussian_response_many_steps_matches_exact_posterior():
    rng = np.random.default_rng(5)
    levels = np.array([(i, j) for i in range(3) for j in range(3) if (i + j) % 3 != 1])
    des = CrossedDesign(levels, rng.standard_normal(len(levels)), [3, 3])
    tau = [2.0, 1.0, 1.5]
    mean, cov = CremModel(des, tau).exact_posterior()
    m = GlmmModel(des, GaussianResponse(2.0), tau=tau, S=64)
    v = m.sample_initial(rng)
    n = 4000
    draws = np.empty((n, m.layout.n_effects))
    for t in range(n):
        v = m.single_step(v, rng)
        draws[t] = v[: m.layout.n_effects]
    est, se = batch_means(draws, 40)
    assert np.all(np.abs(est - mean) <= 4 * se)
    var, var_se = batch_means((draws - mean) ** 2, 40)
    assert np.all(np.abs(var - np.diag(cov)) <= 4 * var_se)


def test_empty_level_conditional_is_prior(rng):
    des = CrossedDesign([[0, 0], [1, 1], [0, 1]], [1.0, -0.5, 0.2], [3, 2])
    m = GlmmModel(des, LaplaceResponse(1.0), tau=[1.0, 4.0, 1.0])
    lt = m._log_conditional(0, 0.7, 4.0, m._offsets(m.sample_initial(rng), 0))
    xi = np.array([0.1, 0.2, 1.9])
    assert lt(xi)[2] == pytest.approx(-0.5 * 4.0 * (1.9 - 0.7) ** 2)


def test_empty_level_chain_marginal(rng):
    # level 2 has no observations, so its effect keeps the N(0, 1/tau_1) prior in the posterior
    des = CrossedDesign([[0], [0]], [1.0, 2.0], [2])
    m = GlmmModel(des, LaplaceResponse(1.0), tau=[1.0, 2.0], S=1)
    v = m.sample_initial(rng)
    n = 40_000
    a2 = np.empty(n)
    for t in range(n):
        v = m.single_step(v, rng)
        a2[t] = v[m.layout.a[0]][1]
    est, se = batch_means(a2)
    assert abs(est) <= 4 * se
    var, var_se = batch_means(a2**2)
    assert abs(var - 0.5) <= 4 * var_se


def test_model_validation(rng):
    des = tiny_laplace_design()
    with pytest.raises(ValueError):
        GlmmModel(des, S=0)
    with pytest.raises(ValueError):
        GlmmModel(des, variant="other")
    with pytest.raises(ValueError):
        GlmmModel(des, proposal_sd=0.0)
    m = GlmmModel(des, GaussianResponse(3.0), tau=[1.0, 1.0])
    assert m.tau[0] == 3.0
    m = GlmmModel(des, tau_mode="sample")
    v = m.sample_initial(rng)
    v[m.layout.a[0]] = 0.0
    with pytest.raises(ValueError, match="degenerate"):
        m._tau_params(v, 0)


def test_simulate_glmm_uses_family(rng):
    des = simulate_glmm(1, 2, 60, [1.0, 1e10, 1e10], LaplaceResponse(2.0), rng, mu=1.0)
    # Laplace(scale 2) residuals have variance 8
    assert np.var(des.y) == pytest.approx(8.0, rel=0.2)


# --- coupled sweeps ---------------------------------------------------------------------


@pytest.mark.parametrize("tau_mode", ["fixed", "sample"])
@pytest.mark.parametrize("variant", ["fully_factorized_maximal", "blocked_reflection"])
def test_coupled_glmm_faithful(tau_mode, variant, rng):
    m = GlmmModel(simulate_glmm(2, 2, 15, 1.0, LaplaceResponse(1.0), rng), tau_mode=tau_mode, S=2, variant=variant)
    v = m.sample_initial(rng)
    for _ in range(10):
        x, y, met = coupled_glmm_sweep(v, v.copy(), m, rng)
        assert met and np.array_equal(x, y)
        v = x


@pytest.mark.parametrize("tau_mode", ["fixed", "sample"])
def test_coupled_glmm_marginal(tau_mode):
    rng = np.random.default_rng(9)
    des = simulate_glmm(1, 2, 4, 1.0, LaplaceResponse(1.0), rng)
    m = GlmmModel(des, tau_mode=tau_mode, S=1)
    x0, y0 = m.sample_initial(rng), m.sample_initial(rng)
    n = 5000
    a = np.array([m.coupled_step(x0, y0, rng)[0] for _ in range(n)])
    b = np.array([m.single_step(x0, rng) for _ in range(n)])
    for f in (lambda z: z, lambda z: z**2):
        fa, fb = f(a), f(b)
        se = np.sqrt(fa.var(0, ddof=1) / n + fb.var(0, ddof=1) / n)
        ok = se > 0
        assert np.all(np.abs(fa.mean(0) - fb.mean(0))[ok] <= 4.5 * se[ok])


def test_gaussian_response_meeting_close_to_collapsed():
    des = simulate_regime(1, 2, 20, 1.0, np.random.default_rng(13))
    crem = CremModel(des)
    glmm = GlmmModel(des, GaussianResponse(1.0), tau=1.0, S=32)
    T = {}
    for name, model in (("crem", crem), ("glmm", glmm)):
        Ts = []
        for r in range(20):
            rng = np.random.default_rng([r, len(name)])
            pk = model.pair_kernel()
            x0, y0 = init_offset_pair(model.sample_initial, pk, rng)
            if name == "crem":
                tr = run_two_step(pk, x0, y0, model.default_eps(), 10_000, rng, log_steps=False)
            else:
                tr = run_one_step(pk, x0, y0, 10_000, rng, log_steps=False)
            Ts.append(tr.T)
        T[name] = np.mean(Ts)
    assert T["glmm"] <= 2 * T["crem"] and T["crem"] <= 2 * T["glmm"]
