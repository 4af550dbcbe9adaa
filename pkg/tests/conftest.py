import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from odergru import geometry as geo

settings.register_profile("pkg", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")


def rand_points(rng, d, n=None, scale=0.5):
    shape = () if n is None else (n,)
    return geo.exp_at_identity(rng.normal(scale=scale, size=shape + (geo.n_entries(d),)))


def rel_err(a, b, floor=1e-8):
    """``max|a - b| / max(max|b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def grads_close(analytic, numeric, tol=1e-4):
    """Per-group relative error, floored at 1e-6 of the largest gradient overall.

    Groups whose gradient vanishes identically (e.g. a bias removed by
    centring) would otherwise be judged on finite-difference noise alone.
    """
    gmax = max(float(np.max(np.abs(b))) for b in numeric)
    errs = [rel_err(a, b, floor=1e-6 * gmax) for a, b in zip(analytic, numeric)]
    return max(errs) <= tol, errs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
