import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixedforest.data import IndividualBlock, LongitudinalDataset, VarianceComponents
from mixedforest.kernels import KernelSpec

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_psd(rng, q, scale=1.0):
    A = rng.normal(size=(q, q))
    return scale * (A @ A.T) / q


def random_dataset(rng, n=4, n_max=3, p=3, q=2, n_min=1, intercept=True):
    blocks = []
    for i in range(n):
        ni = int(rng.integers(n_min, n_max + 1))
        t = np.sort(rng.choice(np.arange(1, 20), size=ni, replace=False)).astype(float)
        t = t + rng.uniform(0, 0.5, size=ni)  # keep strictly increasing, non-integer
        t = np.sort(t)
        Z = rng.normal(size=(ni, q))
        if intercept:
            Z[:, 0] = 1.0
        blocks.append(IndividualBlock(f"s{i}", t, rng.normal(size=(ni, p)), Z, rng.normal(size=ni) * 3))
    return LongitudinalDataset(tuple(blocks))


def random_vc(rng, q, stochastic=True):
    return VarianceComponents(random_psd(rng, q), float(rng.uniform(0.1, 2.0)) if stochastic else 0.0,
                              float(rng.uniform(0.2, 2.0)))


KERNELS = [KernelSpec("none"), KernelSpec("brownian"), KernelSpec("fractional_brownian", h=0.3),
           KernelSpec("ornstein_uhlenbeck", alpha=1.5)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
