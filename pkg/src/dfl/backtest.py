"""Long-only top-fraction portfolio simulation and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import PriceTable, ReturnPanel, TradingCalendar, UniverseSnapshot

logger = logging.getLogger(__name__)

ANNUALIZATION = 252
ICIR_EPS = 1e-8
# the eps above limits IC precision to roughly 1e-7, so dispersion below this is noise
ZERO_DISPERSION = 1e-6


class BacktestError(ValueError):
    pass


@dataclass
class BacktestConfig:
    fraction: float = 0.10
    cost_rate: float = 0.004
    horizon: int = 20
    schedule: str = "monthly"
    benchmark: str = "equal_weight"

    def __post_init__(self):
        if not 0 < self.fraction <= 0.5:
            raise ValueError("selection fraction must lie in (0, 0.5]")
        if self.cost_rate < 0:
            raise ValueError("cost rate must be non-negative")
        if self.schedule != "monthly":
            raise ValueError(f"unsupported rebalance schedule {self.schedule!r}")
        if self.benchmark != "equal_weight":
            raise ValueError(f"unsupported benchmark {self.benchmark!r}")


@dataclass
class PortfolioState:
    """Holdings as weights of net value; whatever is not held sits in cash."""

    date: str
    holdings: dict[str, float] = field(default_factory=dict)
    net_value: float = 1.0

    @property
    def cash(self) -> float:
        return 1.0 - sum(self.holdings.values())


@dataclass
class Metrics:
    alpha: float
    ir: float
    sr: float
    flags: list[str] = field(default_factory=list)


@dataclass
class BacktestReport:
    dates: list[str]
    net_value: np.ndarray
    benchmark: np.ndarray
    alpha: float
    ir: float
    sr: float
    icir: float
    avg_turnover: float
    holdings: list[tuple[str, str, float]]
    flags: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def excess(self) -> np.ndarray:
        return self.net_value / self.benchmark - 1.0

    def metrics(self) -> dict:
        return {"alpha": self.alpha, "icir": self.icir, "ir": self.ir, "sr": self.sr,
                "avg_turnover": self.avg_turnover}


# ---------------------------------------------------------------------------
# portfolio operations

def rank_and_select(ids: Sequence[str], scores, fraction: float) -> list[str]:
    """The ``ceil(fraction * n)`` highest scores; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) == 0:
        raise BacktestError("cannot select from an empty cross-section")
    count = math.ceil(fraction * len(ids) - 1e-12)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:max(count, 1)]]


def rebalance(state: PortfolioState, target: Sequence[str], cost_rate: float
              ) -> tuple[PortfolioState, float, float]:
    """Move to equal weights on ``target``; returns (state, traded notional, cost).

    Traded notional is ``sum |w_new - w_old|`` over stocks, as a fraction of
    net value; the cost is ``cost_rate`` times that amount of money.
    """
    if not target:
        raise BacktestError("rebalance target is empty")
    w = 1.0 / len(target)
    new = {s: w for s in target}
    names = set(new) | set(state.holdings)
    traded = sum(abs(new.get(s, 0.0) - state.holdings.get(s, 0.0)) for s in names)
    cost = cost_rate * traded * state.net_value
    if traded < 1e-15:
        return PortfolioState(state.date, dict(state.holdings), state.net_value), 0.0, 0.0
    return PortfolioState(state.date, new, state.net_value - cost), traded, cost


class _Book:
    """Money amounts per stock plus cash, marked to the last known price."""

    def __init__(self, cost_rate: float):
        self.cost_rate = cost_rate
        self.value: dict[str, float] = {}
        self.last: dict[str, float] = {}
        self.cash = 1.0

    @property
    def nav(self) -> float:
        return self.cash + sum(self.value.values())

    def state(self, date: str) -> PortfolioState:
        nav = self.nav
        return PortfolioState(date, {s: v / nav for s, v in self.value.items()}, nav)

    def mark(self, prices: PriceTable, t: int, date: str, members, warnings: list[str] | None):
        for s in sorted(self.value):
            p = prices.close[t, prices.columns([s])[0]]
            if np.isfinite(p):
                self.value[s] *= p / self.last[s]
                self.last[s] = p
            elif warnings is not None:
                warnings.append(f"{date}: no price for held {s}; liquidated at last price")
            if not np.isfinite(p) or (members is not None and s not in members):
                amount = self.value.pop(s)
                del self.last[s]
                self.cash += amount * (1.0 - self.cost_rate)

    def reset(self, prices: PriceTable, t: int, target: Sequence[str]) -> tuple[float, float]:
        state = self.state("")
        new, traded, cost = rebalance(state, target, self.cost_rate)
        if traded == 0.0:
            return 0.0, 0.0
        self.value = {s: w * new.net_value for s, w in new.holdings.items()}
        self.last = dict(zip(target, prices.close[t, prices.columns(target)]))
        self.cash = 0.0
        return traded, cost


def rebalance_dates(calendar: TradingCalendar, start: str, end: str) -> list[int]:
    """First trading day of each month in range (the range start always counts)."""
    idx = calendar.between(start, end)
    return [t for j, t in enumerate(idx) if j == 0 or calendar[t][:7] != calendar[t - 1][:7]]


def run_backtest(scores: Mapping[str, tuple], prices: PriceTable, calendar: TradingCalendar,
                 start: str, end: str, config: BacktestConfig | None = None,
                 universes: Sequence[UniverseSnapshot] | None = None,
                 returns: ReturnPanel | None = None) -> BacktestReport:
    """Simulate the strategy over trading dates in ``[start, end]``.

    ``scores`` maps a date to ``(ids, values)``.  A rebalance at close of day
    t uses the scores dated t-1, so nothing from day t feeds the selection.
    Curves start at 1.0 on the day before the first rebalance.  When
    ``universes`` is given, a holding that leaves the universe is sold to cash.
    """
    config = config or BacktestConfig()
    idx = calendar.between(start, end)
    if not idx:
        raise BacktestError(f"no trading dates in [{start}, {end}]")
    if idx[0] == 0:
        raise BacktestError("the backtest needs one trading date before its start for scoring")
    reb = set(rebalance_dates(calendar, start, end))
    members = None
    if universes is not None:
        by_date = {u.date: set(u.ids) for u in universes}
    port, bench = _Book(config.cost_rate), _Book(0.0)
    dates, nv, bv = [calendar[idx[0] - 1]], [1.0], [1.0]
    holdings, turnovers, warnings = [], [], []
    for t in idx:
        date = calendar[t]
        if universes is not None:
            members = by_date.get(date, set())
        port.mark(prices, t, date, members, warnings)
        bench.mark(prices, t, date, members, None)
        if t in reb:
            prev = calendar[t - 1]
            if prev not in scores:
                raise BacktestError(f"rebalance on {date} needs scores dated {prev}")
            ids, vals = scores[prev]
            vals = np.asarray(vals, dtype=np.float64)
            cols = prices.columns(ids)
            ok = np.isfinite(vals) & np.isfinite(prices.close[t, cols])
            if members is not None:
                ok &= np.array([s in members for s in ids], dtype=bool)
            cand = [s for s, keep in zip(ids, ok) if keep]
            if not cand:
                raise BacktestError(f"no tradable scored stocks on {date}")
            chosen = rank_and_select(cand, vals[ok], config.fraction)
            traded, _ = port.reset(prices, t, chosen)
            bench.reset(prices, t, cand)
            turnovers.append(0.5 * traded)
            w = 1.0 / len(chosen)
            holdings.extend((date, s, w) for s in sorted(chosen))
        dates.append(date)
        nv.append(port.nav)
        bv.append(bench.nav)
    for w in warnings:
        logger.warning(w)
    nv, bv = np.array(nv), np.array(bv)
    m = compute_metrics(nv, bv)
    icir, icir_flag = (math.nan, False)
    if returns is not None:
        icir, icir_flag = realized_icir(scores, returns, config.horizon, start, end, with_flag=True)
    flags = list(m.flags) + (["icir: zero IC dispersion"] if icir_flag else [])
    return BacktestReport(dates, nv, bv, m.alpha, m.ir, m.sr, icir,
                          float(np.mean(turnovers)) if turnovers else 0.0, holdings, flags, warnings,
                          asdict(config))


# ---------------------------------------------------------------------------
# metrics

def _ratio(x: np.ndarray, name: str, flags: list[str]) -> float:
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    if not sd > 1e-15:
        flags.append(f"{name}: zero standard deviation")
        return 0.0
    return float(x.mean() / sd * math.sqrt(ANNUALIZATION))


def compute_metrics(net_value, benchmark) -> Metrics:
    """Annualized geometric active return, information ratio and Sharpe ratio."""
    nv = np.asarray(net_value, dtype=np.float64)
    bv = np.asarray(benchmark, dtype=np.float64)
    if nv.shape != bv.shape or nv.ndim != 1 or len(nv) < 2:
        raise ValueError("curves must be aligned 1-d series of length >= 2")
    p = nv[1:] / nv[:-1] - 1.0
    m = bv[1:] / bv[:-1] - 1.0
    T = len(p)
    growth = np.prod(1.0 + p) / np.prod(1.0 + m)
    alpha = float(growth ** (ANNUALIZATION / T) - 1.0)
    flags: list[str] = []
    ir = _ratio(p - m, "ir", flags)
    sr = _ratio(p, "sr", flags)
    return Metrics(alpha, ir, sr, flags)


def _pearson(f: np.ndarray, r: np.ndarray, eps: float = ICIR_EPS) -> float:
    fc, rc = f - f.mean(), r - r.mean()
    return float((fc * rc).mean() / ((f.std() + eps) * (r.std() + eps)))


def realized_ic_series(scores: Mapping[str, tuple], returns: ReturnPanel, k: int,
                       start: str, end: str) -> list[tuple[str, float]]:
    """IC of the scores on the first scored trading date of each month."""
    cal = returns.calendar
    col = {s: j for j, s in enumerate(returns.ids)}
    out, seen = [], set()
    for t in cal.between(start, end):
        date = cal[t]
        if date[:7] in seen or date not in scores:
            continue
        ids, vals = scores[date]
        vals = np.asarray(vals, dtype=np.float64)
        r = returns.values[k][t, np.array([col[s] for s in ids], dtype=np.intp)]
        ok = np.isfinite(r) & np.isfinite(vals)
        if ok.sum() < 3:
            continue
        seen.add(date[:7])
        out.append((date, _pearson(vals[ok], r[ok])))
    return out


def realized_icir(scores: Mapping[str, tuple], returns: ReturnPanel, k: int, start: str, end: str,
                  with_flag: bool = False):
    """ICIR of monthly-sampled realized ICs; zero dispersion is flagged."""
    ics = np.array([ic for _, ic in realized_ic_series(scores, returns, k, start, end)])
    if len(ics) < 2:
        raise BacktestError("realized ICIR needs at least two monthly ICs")
    sd = ics.std(ddof=1)
    value = float(ics.mean() / (sd + ICIR_EPS))
    return (value, bool(sd < ZERO_DISPERSION)) if with_flag else value


# ---------------------------------------------------------------------------
# output files

def _fmt(v: float) -> str:
    return repr(float(v))


def write_report(report: BacktestReport, out_dir, extra: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"metrics": report.metrics(), "flags": report.flags, "warnings": report.warnings,
           "config": report.config, "start": report.dates[1], "end": report.dates[-1],
           "final_net_value": float(report.net_value[-1]),
           "final_benchmark": float(report.benchmark[-1])}
    if extra:
        doc.update(extra)
    paths = [out / "report.json", out / "curves.csv", out / "holdings.csv"]
    paths[0].write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "net_value", "benchmark", "excess"])
        for d, a, b, e in zip(report.dates, report.net_value, report.benchmark, report.excess):
            w.writerow([d, _fmt(a), _fmt(b), _fmt(e)])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rebalance_date", "stock_id", "weight"])
        for d, s, wt in report.holdings:
            w.writerow([d, s, _fmt(wt)])
    return paths


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return x.item()
    return x


def read_curves(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return ([r["date"] for r in rows], np.array([float(r["net_value"]) for r in rows]),
            np.array([float(r["benchmark"]) for r in rows]))
