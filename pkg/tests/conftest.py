from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dfl.data import (FactorPanel, MarketPanel, PriceTable, UniverseSnapshot, business_calendar)

settings.register_profile("dfl", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dfl")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def make_panel(close, industries, F=None, ids=None, start="2021-01-04", names=None, groups=None):
    """Static-universe panel from a dates x stocks price matrix."""
    close = np.asarray(close, dtype=np.float64)
    T, S = close.shape
    ids = tuple(ids or (f"S{j:02d}" for j in range(S)))
    cal = business_calendar(start, n_dates=T)
    ind = np.asarray(industries, dtype=np.int64)
    universes = [UniverseSnapshot(d, ids, ind) for d in cal.dates]
    if F is None:
        F = np.random.default_rng(0).standard_normal((T, S, 2))
    m = F.shape[-1]
    names = tuple(names or (f"f{j}" for j in range(m)))
    groups = tuple(groups or ("value",) * m)
    factors = FactorPanel(names, groups, [np.asarray(F[t], dtype=np.float64) for t in range(T)])
    return MarketPanel(cal, universes, factors, PriceTable(ids, close))


def small_sections(seed=0, n_stocks=30, n_dates=60, horizons=(3, 5), **kw):
    from dfl.dataset import build_sections
    from dfl.synthetic import SyntheticSpec, generate_synthetic
    spec = SyntheticSpec(n_stocks=n_stocks, n_factors=3, n_dates=n_dates, beta=(0.002, -0.001, 0.0),
                         noise_vol=0.01, seed=seed, **kw)
    return build_sections(generate_synthetic(spec), horizons)[0]
