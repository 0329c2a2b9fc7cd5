"""Panel data model, CSV ingestion, forward returns, cleaning and split plans."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FACTOR_GROUPS = ("reversal", "value", "size", "momentum", "quality")
DEFAULT_HORIZONS = (3, 5, 10, 15, 20)


class ParseError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class DataError(ValueError):
    pass


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class TradingCalendar:
    dates: tuple[str, ...]

    def __post_init__(self):
        parsed = [date.fromisoformat(d) for d in self.dates]
        for a, b in zip(parsed, parsed[1:]):
            if not a < b:
                raise ValueError(f"calendar not strictly increasing at {a} -> {b}")
        object.__setattr__(self, "_index", {d: i for i, d in enumerate(self.dates)})

    def __len__(self) -> int:
        return len(self.dates)

    def __getitem__(self, i):
        return self.dates[i]

    def __contains__(self, d: str) -> bool:
        return d in self._index

    def index(self, d: str) -> int:
        try:
            return self._index[d]
        except KeyError:
            raise AlignmentError(f"date {d} is not in the trading calendar") from None

    def between(self, start: str, end: str) -> list[int]:
        """Calendar indices of trading dates in the closed range [start, end]."""
        lo = int(np.searchsorted(self.dates, start, side="left"))
        hi = int(np.searchsorted(self.dates, end, side="right"))
        return list(range(lo, hi))


@dataclass(frozen=True)
class UniverseSnapshot:
    date: str
    ids: tuple[str, ...]
    industries: np.ndarray

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"{self.date}: duplicate stock ids in universe")
        if len(self.industries) != len(self.ids):
            raise ValueError(f"{self.date}: one industry label per member required")

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass
class FactorPanel:
    """Per-date raw exposures; NaN marks a missing value.

    ``values[t]`` rows follow ``universes[t].ids`` of the owning panel.
    """

    names: tuple[str, ...]
    groups: tuple[str, ...]
    values: list[np.ndarray]

    def __post_init__(self):
        if len(self.names) != len(self.groups):
            raise ValueError("one group label per factor required")
        m = len(self.names)
        for v in self.values:
            if v.ndim != 2 or v.shape[1] != m:
                raise ValueError(f"factor matrix with {v.shape} does not have {m} columns")

    @property
    def m(self) -> int:
        return len(self.names)

    def missing(self, t: int) -> np.ndarray:
        return np.isnan(self.values[t])


@dataclass
class PriceTable:
    """Close prices, dates x stocks, NaN where a stock has no quote."""

    ids: tuple[str, ...]
    close: np.ndarray

    def __post_init__(self):
        self._col = {s: j for j, s in enumerate(self.ids)}

    def columns(self, ids) -> np.ndarray:
        return np.array([self._col[s] for s in ids], dtype=np.intp)


@dataclass
class MarketPanel:
    calendar: TradingCalendar
    universes: list[UniverseSnapshot]
    factors: FactorPanel
    prices: PriceTable
    meta: dict = field(default_factory=dict)


@dataclass
class ReturnPanel:
    """Simple close-to-close forward returns; ``values[k][t, j]`` covers t -> t+k."""

    calendar: TradingCalendar
    ids: tuple[str, ...]
    horizons: tuple[int, ...]
    values: dict[int, np.ndarray]

    def label_end(self, t: int, k: int) -> str | None:
        return self.calendar[t + k] if t + k < len(self.calendar) else None

    def for_members(self, t: int, cols: np.ndarray) -> np.ndarray:
        """(K, n) matrix of forward returns for the given price-table columns."""
        return np.stack([self.values[k][t, cols] for k in self.horizons])


# ---------------------------------------------------------------------------
# CSV ingestion

def _read_rows(path: Path, header: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = tuple(next(reader))
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if got != header:
            raise ParseError(f"{path}: row 1: expected header {','.join(header)}, got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _parse_date(s: str, path, lineno) -> str:
    try:
        date.fromisoformat(s)
    except ValueError:
        raise ParseError(f"{path}: row {lineno}: bad date {s!r}") from None
    if len(s) != 10:
        raise ParseError(f"{path}: row {lineno}: date {s!r} is not YYYY-MM-DD")
    return s


def _parse_float(s: str, path, lineno) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"{path}: row {lineno}: bad number {s!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"{path}: row {lineno}: non-finite number {s!r}")
    return v


def load_panel(prices_path, factors_path, membership_path, groups_path=None) -> MarketPanel:
    """Read the four CSV files into an aligned :class:`MarketPanel`.

    The calendar is the sorted set of dates in ``prices.csv``.  Universe
    members keep the order in which they appear in ``membership.csv``.
    """
    prices_path, factors_path, membership_path = map(Path, (prices_path, factors_path, membership_path))

    quotes: dict[tuple[str, str], float] = {}
    stock_order: dict[str, None] = {}
    for lineno, (d, sid, close) in _read_rows(prices_path, ("date", "stock_id", "close")):
        d = _parse_date(d, prices_path, lineno)
        quotes[(d, sid)] = _parse_float(close, prices_path, lineno)
        stock_order.setdefault(sid)
    calendar = TradingCalendar(tuple(sorted({d for d, _ in quotes})))
    ids = tuple(stock_order)
    col = {s: j for j, s in enumerate(ids)}
    close = np.full((len(calendar), len(ids)), np.nan)
    for (d, sid), v in quotes.items():
        close[calendar.index(d), col[sid]] = v

    members: dict[str, dict[str, int]] = {d: {} for d in calendar.dates}
    for lineno, (d, sid, ind) in _read_rows(membership_path, ("date", "stock_id", "industry_id")):
        d = _parse_date(d, membership_path, lineno)
        if d not in calendar:
            raise AlignmentError(f"{membership_path}: row {lineno}: date {d} not in calendar")
        try:
            label = int(ind)
        except ValueError:
            raise ParseError(f"{membership_path}: row {lineno}: bad industry id {ind!r}") from None
        if sid in members[d]:
            raise ParseError(f"{membership_path}: row {lineno}: duplicate member {sid} on {d}")
        members[d][sid] = label
    universes = [UniverseSnapshot(d, tuple(members[d]), np.array(list(members[d].values()), dtype=np.int64))
                 for d in calendar.dates]

    names: list[str] = []
    groups: dict[str, str] = {}
    if groups_path is not None:
        groups_path = Path(groups_path)
        for lineno, (name, group) in _read_rows(groups_path, ("factor_name", "group")):
            if group not in FACTOR_GROUPS:
                raise ParseError(f"{groups_path}: row {lineno}: unknown group {group!r}")
            if name in groups:
                raise ParseError(f"{groups_path}: row {lineno}: duplicate factor {name!r}")
            groups[name] = group
            names.append(name)

    cells: list[tuple[int, str, str, float]] = []
    for lineno, (d, sid, name, value) in _read_rows(factors_path, ("date", "stock_id", "factor_name", "value")):
        d = _parse_date(d, factors_path, lineno)
        if d not in calendar:
            raise AlignmentError(f"{factors_path}: row {lineno}: date {d} not in calendar")
        if sid not in members[d]:
            raise AlignmentError(f"{factors_path}: row {lineno}: stock {sid} is not a member on {d}")
        if name not in groups:
            if groups_path is not None:
                raise AlignmentError(f"{factors_path}: row {lineno}: factor {name!r} has no group")
            groups[name] = "ungrouped"
            names.append(name)
        cells.append((calendar.index(d), sid, name, _parse_float(value, factors_path, lineno)))

    fcol = {n: j for j, n in enumerate(names)}
    row_of = [{s: i for i, s in enumerate(u.ids)} for u in universes]
    values = [np.full((u.n, len(names)), np.nan) for u in universes]
    for t, sid, name, v in cells:
        values[t][row_of[t][sid], fcol[name]] = v
    factors = FactorPanel(tuple(names), tuple(groups[n] for n in names), values)
    return MarketPanel(calendar, universes, factors, PriceTable(ids, close))


def load_dir(directory) -> MarketPanel:
    d = Path(directory)
    groups = d / "factor_groups.csv"
    return load_panel(d / "prices.csv", d / "factors.csv", d / "membership.csv",
                      groups if groups.exists() else None)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_panel(panel: MarketPanel, directory) -> list[Path]:
    """Write the canonical CSV form; ``load_panel`` of the result is lossless."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cal, ids = panel.calendar, panel.prices.ids
    paths = [out / "prices.csv", out / "factors.csv", out / "membership.csv", out / "factor_groups.csv"]

    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "stock_id", "close"))
        close = panel.prices.close
        for t, d in enumerate(cal.dates):
            row = close[t]
            for j in np.flatnonzero(~np.isnan(row)):
                w.writerow((d, ids[j], _fmt(row[j])))

    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "stock_id", "factor_name", "value"))
        names = panel.factors.names
        for t, (u, vals) in enumerate(zip(panel.universes, panel.factors.values)):
            for i, sid in enumerate(u.ids):
                for j, name in enumerate(names):
                    v = vals[i, j]
                    if not np.isnan(v):
                        w.writerow((cal[t], sid, name, _fmt(v)))

    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "stock_id", "industry_id"))
        for u in panel.universes:
            for sid, ind in zip(u.ids, u.industries):
                w.writerow((u.date, sid, int(ind)))

    with open(paths[3], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("factor_name", "group"))
        for name, group in zip(panel.factors.names, panel.factors.groups):
            w.writerow((name, group))
    return paths


# ---------------------------------------------------------------------------
# returns and cleaning

def forward_returns(prices: PriceTable, calendar: TradingCalendar,
                    horizons=DEFAULT_HORIZONS) -> ReturnPanel:
    close = prices.close
    bad = ~np.isnan(close) & (close <= 0)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        raise DataError(f"non-positive close {close[t, j]} for {prices.ids[j]} on {calendar[t]}")
    horizons = tuple(sorted(int(k) for k in horizons))
    if any(k < 1 for k in horizons):
        raise ValueError("horizons must be positive trading-day counts")
    values = {}
    for k in horizons:
        r = np.full_like(close, np.nan)
        if k < len(calendar):
            r[:-k] = close[k:] / close[:-k] - 1.0
        values[k] = r
    return ReturnPanel(calendar, prices.ids, horizons, values)


@dataclass
class CleanResult:
    values: np.ndarray | None   # cleaned matrix of the surviving rows, None if the date is skipped
    kept: np.ndarray            # bool, one entry per input row
    warning: str | None = None


def _winsorize(col: np.ndarray, n_sigma: float, max_iter: int = 200) -> np.ndarray:
    # clip at mean +/- n_sigma*std until the bounds are self-consistent
    col = col.copy()
    for _ in range(max_iter):
        mu, sd = col.mean(), col.std()
        if sd == 0:
            break
        lo, hi = mu - n_sigma * sd, mu + n_sigma * sd
        tol = 1e-9 * sd
        if not ((col < lo - tol) | (col > hi + tol)).any():
            break
        col = np.clip(col, lo, hi)
    return col


def clean_cross_section(F: np.ndarray, missing: np.ndarray | None = None, *,
                        max_missing_frac: float = 0.5, winsor_sigma: float = 5.0,
                        min_stocks: int = 3) -> CleanResult:
    """Drop sparse rows, median-impute, then winsorize each column.

    Rows missing more than ``max_missing_frac`` of the factors are dropped.
    Remaining gaps take the column's cross-sectional median.  Columns are
    clipped at ``winsor_sigma`` population standard deviations, iterated to a
    fixed point so that cleaning is idempotent.
    """
    F = np.asarray(F, dtype=np.float64)
    if missing is None:
        missing = np.isnan(F)
    missing = missing | np.isnan(F)
    m = F.shape[1]
    kept = missing.sum(axis=1) <= max_missing_frac * m
    if kept.sum() < min_stocks:
        return CleanResult(None, kept, f"only {int(kept.sum())} stocks survive cleaning (< {min_stocks})")
    X = np.where(missing, np.nan, F)[kept]
    holes = np.isnan(X)
    warning = None
    for j in range(m):
        if holes[:, j].any():
            obs = X[~holes[:, j], j]
            if obs.size:
                X[holes[:, j], j] = np.median(obs)
            else:
                X[:, j] = 0.0
                warning = f"factor column {j} fully missing; filled with 0"
        X[:, j] = _winsorize(X[:, j], winsor_sigma)
    return CleanResult(X, kept, warning)


# ---------------------------------------------------------------------------
# walk-forward split plan

def add_months(d: date, months: int) -> date:
    y, mo = divmod(d.month - 1 + months, 12)
    year, month = d.year + y, mo + 1
    days = [31, 29 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 28,
            31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month - 1]
    return date(year, month, min(d.day, days))


@dataclass(frozen=True)
class SplitGroup:
    train: tuple[str, str]
    valid: tuple[str, str]
    test: tuple[str, str]


@dataclass(frozen=True)
class SplitPlan:
    groups: tuple[SplitGroup, ...]
    max_horizon: int

    def __len__(self) -> int:
        return len(self.groups)


def make_split_plan(calendar: TradingCalendar, first_test_start: str, group_count: int, *,
                    max_horizon: int = 20, train_start: str | None = None,
                    period_months: int = 6, gap_months: int = 1) -> SplitPlan:
    """Expanding-window walk-forward plan.

    Each group tests on ``period_months`` starting at its test start, validates
    on the preceding ``period_months`` with the last ``gap_months`` removed, and
    trains on everything from ``train_start`` up to the validation start.  The
    validation end is pulled back further if fewer than ``max_horizon``
    trading days would separate it from the test start.
    """
    if group_count < 1:
        raise PlanError("group_count must be >= 1")
    if len(calendar) == 0:
        raise PlanError("empty calendar")
    first = date.fromisoformat(calendar[0])
    start = date.fromisoformat(train_start) if train_start else first.replace(day=1)
    test0 = date.fromisoformat(first_test_start)
    groups = []
    for g in range(group_count):
        test_start = add_months(test0, g * period_months)
        test_end = add_months(test_start, period_months) - timedelta(days=1)
        valid_start = add_months(test_start, -period_months)
        valid_end = add_months(test_start, -gap_months) - timedelta(days=1)
        train_end = valid_start - timedelta(days=1)
        if valid_start <= start:
            raise PlanError(f"group {g}: no training history before {valid_start}")
        # a week of slack: the range may end on a weekend or holiday
        if date.fromisoformat(calendar[-1]) < test_end - timedelta(days=6):
            raise PlanError(f"group {g}: calendar ends {calendar[-1]} before test end {test_end}")
        iso = [x.isoformat() for x in (start, train_end, valid_start, valid_end, test_start, test_end)]
        test_idx = calendar.between(iso[4], iso[5])
        if not test_idx:
            raise PlanError(f"group {g}: no trading dates in test range")
        valid_idx = calendar.between(iso[2], iso[3])
        limit = test_idx[0] - max_horizon - 1
        if valid_idx and valid_idx[-1] > limit:
            valid_idx = [i for i in valid_idx if i <= limit]
            if valid_idx:
                iso[3] = calendar[valid_idx[-1]]
        if not valid_idx:
            raise PlanError(f"group {g}: validation range is empty after the gap")
        if not calendar.between(iso[0], iso[1]):
            raise PlanError(f"group {g}: no trading dates in training range")
        groups.append(SplitGroup((iso[0], iso[1]), (iso[2], iso[3]), (iso[4], iso[5])))
    return SplitPlan(tuple(groups), max_horizon)


def audit_split_plan(plan: SplitPlan, calendar: TradingCalendar) -> list[str]:
    """Return a description of every label-window overlap; empty means clean.

    A date t labels the trading-day window [t, t + max_horizon].
    """
    problems = []
    k = plan.max_horizon
    for g, grp in enumerate(plan.groups):
        valid = calendar.between(*grp.valid)
        test = calendar.between(*grp.test)
        tr, va, te = (date.fromisoformat(x[0]) for x in (grp.train, grp.valid, grp.test))
        if not (date.fromisoformat(grp.train[1]) < va <= date.fromisoformat(grp.valid[1]) < te):
            problems.append(f"group {g}: ranges out of order")
        if tr > va:
            problems.append(f"group {g}: train starts after validation")
        for tv in valid:
            for ts in test:
                if max(tv, ts) <= min(tv + k, ts + k):
                    problems.append(f"group {g}: validation {calendar[tv]} overlaps test {calendar[ts]}")
                    break
            else:
                continue
            break
        if g > 0:
            prev_end = date.fromisoformat(plan.groups[g - 1].test[1])
            if date.fromisoformat(grp.test[0]) != prev_end + timedelta(days=1):
                problems.append(f"group {g}: test range not contiguous with group {g - 1}")
    return problems


def business_calendar(start: str, end: str | None = None, n_dates: int | None = None) -> TradingCalendar:
    """Mon-Fri calendar from ``start``; bounded by ``end`` or a date count."""
    days = np.arange(np.datetime64(start), np.datetime64(end) + 1) if end else None
    if days is None:
        if n_dates is None:
            raise ValueError("need end or n_dates")
        days = np.arange(np.datetime64(start), np.datetime64(start) + n_dates * 2 + 14)
    days = days[np.is_busday(days)]
    if n_dates is not None:
        days = days[:n_dates]
    return TradingCalendar(tuple(str(d) for d in days))
