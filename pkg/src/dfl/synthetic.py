"""Seeded synthetic market with planted factor structure.

Daily stock returns are

    r[t+1] = market[t+1] + industry[t+1] + F[t] @ beta + gamma * tanh(F[t] @ beta2) + noise

with slowly mean-reverting factor exposures, so multi-day forward returns
remain predictable from today's exposures.  Universe membership churns at
month starts while keeping its size fixed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (FACTOR_GROUPS, FactorPanel, MarketPanel, PriceTable, UniverseSnapshot,
                   business_calendar)


@dataclass
class SyntheticSpec:
    n_stocks: int = 200
    n_factors: int = 8
    n_industries: int = 5
    n_dates: int = 1000
    beta: tuple[float, ...] | None = None          # planted linear loadings (zeros if None)
    beta_nonlinear: tuple[float, ...] | None = None  # direction inside tanh (zeros if None)
    gamma: float = 0.0
    industry_effects: tuple[float, ...] | None = None  # per-industry daily drift (zeros if None)
    industry_vol: float = 0.0
    noise_vol: float = 0.02
    market_vol: float = 0.01
    factor_persistence: float = 0.995
    churn_rate: float = 0.02
    pool_size: int | None = None
    missing_rate: float = 0.0
    start_date: str = "2018-01-01"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_stocks", "n_factors", "n_industries", "n_dates"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name, length in (("beta", self.n_factors), ("beta_nonlinear", self.n_factors),
                             ("industry_effects", self.n_industries)):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(x) for x in v)
                if len(v) != length:
                    raise ValueError(f"{name} needs {length} entries, got {len(v)}")
                setattr(self, name, v)
        if not 0.0 <= self.factor_persistence < 1.0:
            raise ValueError("factor_persistence must lie in [0, 1)")
        if self.noise_vol < 0 or self.market_vol < 0 or self.industry_vol < 0:
            raise ValueError("volatilities must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _vec(v, n) -> np.ndarray:
    return np.zeros(n) if v is None else np.asarray(v, dtype=np.float64)


def planted_signal(F: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Stock-specific expected next-day return implied by exposures ``F``."""
    beta = _vec(spec.beta, spec.n_factors)
    beta2 = _vec(spec.beta_nonlinear, spec.n_factors)
    return F @ beta + spec.gamma * np.tanh(F @ beta2)


def generate_synthetic(spec: SyntheticSpec) -> MarketPanel:
    rng = np.random.default_rng(spec.seed)
    n, m, T = spec.n_stocks, spec.n_factors, spec.n_dates
    pool = spec.pool_size or n + max(1, int(np.ceil(0.25 * n)))
    if pool < n:
        raise ValueError("pool_size must be at least n_stocks")
    calendar = business_calendar(spec.start_date, n_dates=T)
    ids = tuple(f"S{i:05d}" for i in range(pool))
    industry = (np.arange(pool) % spec.n_industries + 1)[rng.permutation(pool)]
    drift = _vec(spec.industry_effects, spec.n_industries)

    rho = spec.factor_persistence
    shock_scale = np.sqrt(1.0 - rho * rho)
    F = rng.standard_normal((pool, m))
    close = np.empty((T, pool))
    close[0] = rng.uniform(10.0, 100.0, pool)

    members = np.sort(rng.permutation(pool)[:n])
    # at least one swap per month whenever churn is enabled
    n_swap = max(1, int(round(spec.churn_rate * n))) if spec.churn_rate > 0 else 0
    churn_log = []
    universes, values = [], []
    for t in range(T):
        d = calendar[t]
        if t > 0:
            ret = (spec.market_vol * rng.standard_normal()
                   + drift[industry - 1]
                   + spec.industry_vol * rng.standard_normal(spec.n_industries)[industry - 1]
                   + planted_signal(F, spec)
                   + spec.noise_vol * rng.standard_normal(pool))
            close[t] = close[t - 1] * (1.0 + np.maximum(ret, -0.9))
            F = rho * F + shock_scale * rng.standard_normal((pool, m))
            if n_swap and d[:7] != calendar[t - 1][:7]:
                outside = np.setdiff1d(np.arange(pool), members)
                leave = rng.choice(members, size=min(n_swap, len(outside)), replace=False)
                enter = rng.choice(outside, size=len(leave), replace=False)
                members = np.sort(np.concatenate([np.setdiff1d(members, leave), enter]))
                churn_log.append({"date": d, "out": [ids[i] for i in sorted(leave)],
                                  "in": [ids[i] for i in sorted(enter)]})
        universes.append(UniverseSnapshot(d, tuple(ids[i] for i in members), industry[members].copy()))
        vals = F[members].copy()
        if spec.missing_rate > 0:
            vals[rng.random(vals.shape) < spec.missing_rate] = np.nan
        values.append(vals)

    names = tuple(f"{FACTOR_GROUPS[j % len(FACTOR_GROUPS)]}_{j}" for j in range(m))
    groups = tuple(FACTOR_GROUPS[j % len(FACTOR_GROUPS)] for j in range(m))
    return MarketPanel(calendar, universes, FactorPanel(names, groups, values),
                       PriceTable(ids, close),
                       meta={"spec": spec.to_dict(), "churn_log": churn_log})


def noise_vol_for_snr(spec: SyntheticSpec, snr: float, samples: int = 200_000) -> float:
    """Noise volatility giving std(planted signal) / noise_vol == snr.

    Exposures are stationary standard normal, so the signal std is estimated
    by Monte Carlo over N(0, I) draws with a fixed seed.
    """
    F = np.random.default_rng(12345).standard_normal((samples, spec.n_factors))
    return float(planted_signal(F, spec).std() / snr)


@dataclass
class PlantedFixture:
    """Loadings used by the acceptance experiments; ``null`` zeroes the signal."""

    seed: int = 0
    snr: float = 0.3
    n_stocks: int = 200
    n_factors: int = 8
    n_industries: int = 5
    n_dates: int = 1000
    linear_scale: float = 0.0015
    nonlinear_scale: float = 0.006
    null: bool = False
    overrides: dict = field(default_factory=dict)

    def spec(self) -> SyntheticSpec:
        m = self.n_factors
        beta = np.zeros(m)
        beta[: min(3, m)] = np.array([1.0, -0.6, 0.4])[: min(3, m)] * self.linear_scale
        beta2 = np.zeros(m)
        if m >= 5:
            beta2[3], beta2[4] = 2.0, -2.0
        else:
            beta2[-1] = 3.0
        # remove the tanh term's linear projection along its own index so the
        # remaining nonlinear signal is invisible to a linear model
        width = float(np.linalg.norm(beta2))
        z, w = np.polynomial.hermite_e.hermegauss(80)
        slope = self.nonlinear_scale * float((w * z * np.tanh(width * z)).sum() / w.sum())
        beta -= slope * beta2 / width
        base = SyntheticSpec(n_stocks=self.n_stocks, n_factors=m, n_industries=self.n_industries,
                             n_dates=self.n_dates, beta=tuple(beta), beta_nonlinear=tuple(beta2),
                             gamma=self.nonlinear_scale, industry_vol=0.004, market_vol=0.01,
                             seed=self.seed)
        noise = noise_vol_for_snr(base, self.snr)
        if self.null:
            base.beta, base.beta_nonlinear, base.gamma = tuple(np.zeros(m)), tuple(np.zeros(m)), 0.0
        base.noise_vol = noise
        for k, v in self.overrides.items():
            setattr(base, k, v)
        base.__post_init__()
        return base
