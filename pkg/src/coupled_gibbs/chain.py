"""Two-step coupled chains, meeting detection and unbiased estimators.

States are flat numpy vectors. A :class:`PairKernel` bundles the coupled
moves; :func:`run_two_step` drives them and records the meeting time.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._validation import check_int, check_positive


def euclidean_distance(x, y) -> float:
    return float(np.linalg.norm(np.asarray(x) - np.asarray(y)))


@dataclass
class PairKernel:
    """Coupled transition for a pair of chains.

    ``contractive_step(x, y, rng) -> (x', y')`` and
    ``maximal_step(x, y, rng) -> (x', y', met)`` must both have the marginal
    kernel ``single_step(x, rng) -> x'`` on each coordinate.
    """

    contractive_step: Callable
    maximal_step: Callable
    single_step: Callable
    distance: Callable = euclidean_distance


@dataclass
class MeetingRecord:
    T: int | None
    steps: list = field(default_factory=list)
    truncated: bool = False

    def modes(self):
        return [s[1] for s in self.steps]


@dataclass
class CoupledTrajectory:
    """X states up to the requested horizon, Y states up to T - 1 (or the truncation point)."""

    x: list
    y: list
    record: MeetingRecord

    @property
    def T(self):
        return self.record.T


@dataclass(frozen=True)
class EstimatorConfig:
    k: int
    m: int
    test_functions: dict = field(default_factory=dict)

    def __post_init__(self):
        check_int(self.k, "k", 0)
        check_int(self.m, "m", 0)
        if self.m < self.k:
            raise ValueError("estimator horizon m must satisfy 0 <= k <= m")


def init_offset_pair(pi0_sampler, kernel, rng):
    """Draw X^{-1}, Y^0 independently from pi0 and return (X^0, Y^0) with X^0 ~ P(X^{-1}, .).

    ``kernel`` is either a :class:`PairKernel` or a callable ``(x, rng) -> x'``.
    """
    step = kernel.single_step if isinstance(kernel, PairKernel) else kernel
    x_prev = pi0_sampler(rng)
    y0 = pi0_sampler(rng)
    x0 = step(x_prev, rng)
    return x0, y0


def run_two_step(pk: PairKernel, x0, y0, eps, max_iter=10**5, rng=None, horizon=0, log_steps=True):
    """Run the two-step coupling until the chains meet.

    At each iteration the contractive move is used while ``distance > eps``
    and the maximal move otherwise. After the meeting time ``T`` the X chain
    alone is extended up to ``horizon`` so that estimators with ``m > T`` can
    be formed.

    Returns
    -------
    CoupledTrajectory
        ``x[t]`` for ``t <= max(horizon, T - 1, T)``, ``y[t]`` for ``t < T``.
    """
    eps = check_positive(eps, "eps") if np.isfinite(eps) else float(eps)
    check_int(max_iter, "max_iter", 1)
    x, y = np.asarray(x0, dtype=float).copy(), np.asarray(y0, dtype=float).copy()
    xs, ys = [x], []
    record = MeetingRecord(T=None)
    if np.array_equal(x, y):
        record.T = 0
    else:
        for t in range(max_iter):
            ys.append(y)
            dist = pk.distance(x, y)
            if dist > eps:
                x, y = pk.contractive_step(x, y, rng)
                mode = "contractive"
            else:
                x, y, _ = pk.maximal_step(x, y, rng)
                mode = "maximal"
            met = bool(np.array_equal(x, y))
            if log_steps:
                record.steps.append((dist, mode, met))
            xs.append(x)
            if met:
                record.T = t + 1
                break
        else:
            record.truncated = True
    if not record.truncated:
        while len(xs) <= horizon:
            xs.append(pk.single_step(xs[-1], rng))
    return CoupledTrajectory(xs, ys, record)


def run_one_step(pk: PairKernel, x0, y0, max_iter=10**5, rng=None, horizon=0, log_steps=True):
    """Maximal coupling at every iteration (no contractive phase)."""
    return run_two_step(pk, x0, y0, np.inf, max_iter, rng, horizon, log_steps)


def _eval(h, state):
    return np.asarray(h(state), dtype=float)


def h_k(trajectory_x, trajectory_y, T, k, h):
    """H_k = h(X^k) + sum_{t=k+1}^{T-1} (h(X^t) - h(Y^t))."""
    if T is None:
        raise ValueError("meeting not achieved; increase max_iter")
    if len(trajectory_x) <= max(k, T - 1) or len(trajectory_y) < T:
        raise ValueError("trajectory too short for the requested estimator")
    out = _eval(h, trajectory_x[k])
    for t in range(k + 1, T):
        out = out + _eval(h, trajectory_x[t]) - _eval(h, trajectory_y[t])
    return out if out.ndim else float(out)


def h_k_m(trajectory_x, trajectory_y, T, cfg: EstimatorConfig):
    """Time-averaged estimator H_{k:m} for every test function in ``cfg``.

    Returns a dict ``name -> value`` (value may be an array if the test
    function is vector valued).
    """
    if T is None:
        raise ValueError("meeting not achieved; increase max_iter")
    k, m = cfg.k, cfg.m
    if len(trajectory_x) <= max(m, T - 1) or len(trajectory_y) < T:
        raise ValueError("trajectory too short for the requested estimator")
    span = m - k + 1
    out = {}
    for name, h in cfg.test_functions.items():
        avg = sum(_eval(h, trajectory_x[l]) for l in range(k, m + 1)) / span
        corr = 0.0
        for l in range(k + 1, T):
            corr = corr + min(1.0, (l - k) / span) * (_eval(h, trajectory_x[l]) - _eval(h, trajectory_y[l]))
        val = avg + corr
        out[name] = val if np.ndim(val) else float(val)
    return out


def choose_k_m(pilot_meeting_times, quantile=0.9, factor=5):
    """Burn-in k as an empirical quantile of pilot meeting times and m = factor * k."""
    times = np.asarray([t for t in pilot_meeting_times if t is not None], dtype=float)
    if times.size == 0:
        raise ValueError("no completed pilot runs")
    k = int(np.ceil(np.quantile(times, quantile)))
    return k, max(factor * k, k)


class BlockCoupler:
    """Interface for one block update inside a composed coupling.

    Subclasses implement in-place updates of block copies of the states.
    """

    def single(self, x, rng):
        raise NotImplementedError

    def contractive(self, x, y, rng):
        raise NotImplementedError

    def maximal(self, x, y, rng):
        """Update both states; return True if the block met."""
        raise NotImplementedError


def compose_pair_kernel(block_couplers: Sequence[BlockCoupler], distance=euclidean_distance) -> PairKernel:
    """Sequential composition of per-block couplings, applied in the given order."""
    couplers = list(block_couplers)

    def single_step(x, rng):
        x = np.array(x, dtype=float)
        for c in couplers:
            c.single(x, rng)
        return x

    def contractive_step(x, y, rng):
        x, y = np.array(x, dtype=float), np.array(y, dtype=float)
        for c in couplers:
            c.contractive(x, y, rng)
        return x, y

    def maximal_step(x, y, rng):
        x, y = np.array(x, dtype=float), np.array(y, dtype=float)
        for c in couplers:
            c.maximal(x, y, rng)
        return x, y, bool(np.array_equal(x, y))

    return PairKernel(contractive_step, maximal_step, single_step, distance)
