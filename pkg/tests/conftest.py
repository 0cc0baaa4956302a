import numpy as np
import pytest
from scipy.stats import norm

from kinkqr import DgpSpec, LongitudinalDataset, generate


@pytest.fixture(scope="session")
def case1_small():
    """Case-1 style data at reduced scale (fast fixture for fit tests)."""
    return generate(DgpSpec(case=1, N=60, seed=11))


@pytest.fixture(scope="session")
def case1_full():
    """Full Case-1 scale: N=200, n=1000."""
    return generate(DgpSpec(case=1, N=200, seed=5))


@pytest.fixture(scope="session")
def taus5():
    return [0.3, 0.4, 0.5, 0.6, 0.7]


def make_noiseless(N=40, seed=3, q=1, beta1=1.0, beta2=-1.0, t=5.0):
    """Exact piecewise-linear data: zero check loss attainable only at t."""
    rng = np.random.default_rng(seed)
    ids, ys, xs, zs = [], [], [], []
    for i in range(N):
        x = rng.uniform(0, 10, 5)
        z = rng.uniform(0, 10, (5, q)) if q else np.empty((5, 0))
        y = (
            3.0
            + beta1 * np.minimum(x - t, 0.0)
            + beta2 * np.maximum(x - t, 0.0)
            - 0.2 * z.sum(axis=1)
        )
        ids += [f"s{i}"] * 5
        ys += list(y)
        xs += list(x)
        zs.append(z)
    return LongitudinalDataset.from_arrays(ids, ys, xs, np.vstack(zs))


def make_tworegime(N=400, seed=0):
    """Quantile-dependent kink location: 4.5 below the median level,
    5.5 above it (locations differ by exactly 1.0)."""
    rng = np.random.default_rng(seed)
    ids, ys, xs = [], [], []
    for i in range(N):
        ni = 5
        x = rng.uniform(0, 10, ni)
        u = rng.uniform(size=ni)
        t_u = np.where(u < 0.5, 4.5, 5.5)
        y = 3.0 + norm.ppf(u) - np.abs(x - t_u) + (u >= 0.5) * 1.0
        ids += [f"s{i}"] * ni
        ys += list(y)
        xs += list(x)
    return LongitudinalDataset.from_arrays(ids, ys, xs, None)


@pytest.fixture(scope="session")
def noiseless():
    return make_noiseless()
