import numpy as np
import pytest

from coupled_gibbs.gaussian import GaussianTarget


def random_target(rng, sizes, coupling=0.4):
    """Random block Gaussian target with moderate cross-block correlation."""
    d = int(sum(sizes))
    A = rng.standard_normal((d, d))
    Q = coupling * A @ A.T / d + np.eye(d)
    return GaussianTarget(rng.standard_normal(d), Q, list(sizes))


def mc_within(sample_mean, target, stderr, k=4.0):
    return np.all(np.abs(np.asarray(sample_mean) - target) <= k * np.asarray(stderr))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def verdict(number, name, ok, detail):
    """Record one PASS/FAIL line for an acceptance criterion and return ``ok``."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
