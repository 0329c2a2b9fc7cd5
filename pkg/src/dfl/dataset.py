"""Cleaned per-date cross-sections ready for the models, plus batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import (MarketPanel, ReturnPanel, SplitGroup, TradingCalendar, clean_cross_section,
                   forward_returns)
from .graph import GraphSnapshot, build_industry_mask, industry_mask

logger = logging.getLogger(__name__)


@dataclass
class CrossSection:
    date: str
    t: int                    # calendar index
    ids: tuple[str, ...]
    industries: np.ndarray
    F: np.ndarray             # cleaned exposures, n x m
    returns: np.ndarray       # K x n forward returns, NaN where the label is unavailable
    horizons: tuple[int, ...]
    feature_date: str         # newest input date used for F and the graph
    label_ends: tuple[str | None, ...]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def graph(self) -> GraphSnapshot:
        return GraphSnapshot(self.date, self.ids, self.industries, industry_mask(self.industries))

    def has_labels(self, min_valid: int = 3) -> bool:
        return bool((np.isfinite(self.returns).sum(axis=1) >= min_valid).all())


@dataclass
class Batch:
    """Equal-size cross-sections stacked along a leading date axis."""

    sections: list[CrossSection]
    F: np.ndarray           # B x n x m
    industries: np.ndarray  # B x n
    returns: np.ndarray     # B x K x n

    @property
    def mask(self) -> np.ndarray:
        ind = self.industries
        return ind[:, :, None] == ind[:, None, :]

    @property
    def dates(self) -> list[str]:
        return [s.date for s in self.sections]

    @property
    def complete(self) -> bool:
        return bool(np.isfinite(self.returns).all())


def build_sections(panel: MarketPanel, horizons, returns: ReturnPanel | None = None,
                   **clean_kwargs) -> tuple[list[CrossSection], list[str]]:
    """Clean every date of ``panel``; returns the sections and warning records."""
    horizons = tuple(sorted(horizons))
    if returns is None:
        returns = forward_returns(panel.prices, panel.calendar, horizons)
    warnings = []
    sections = []
    for t, (u, F) in enumerate(zip(panel.universes, panel.factors.values)):
        if u.n == 0:
            warnings.append(f"{u.date}: empty universe; date skipped")
            continue
        res = clean_cross_section(F, **clean_kwargs)
        if res.values is None:
            warnings.append(f"{u.date}: {res.warning}; date skipped")
            continue
        if res.warning:
            warnings.append(f"{u.date}: {res.warning}")
        keep = np.flatnonzero(res.kept)
        ids = tuple(u.ids[i] for i in keep)
        graph = build_industry_mask(type(u)(u.date, ids, u.industries[keep]))
        cols = panel.prices.columns(ids)
        sections.append(CrossSection(
            date=u.date, t=t, ids=ids, industries=graph.industries, F=res.values,
            returns=np.stack([returns.values[k][t, cols] for k in horizons]),
            horizons=horizons, feature_date=u.date,
            label_ends=tuple(returns.label_end(t, k) for k in horizons)))
    for w in warnings:
        logger.warning(w)
    return sections, warnings


def select(sections: list[CrossSection], start: str, end: str) -> list[CrossSection]:
    return [s for s in sections if start <= s.date <= end]


def group_sections(sections: list[CrossSection], group: SplitGroup, calendar: TradingCalendar,
                   max_horizon: int):
    """Train / validation / test sections of one split group.

    Training dates whose label window runs past the end of the training range
    are purged, so no training label peeks into validation.
    """
    train_idx = calendar.between(*group.train)
    last_train = train_idx[-1] if train_idx else -1
    train = [s for s in select(sections, *group.train) if s.t + max_horizon <= last_train]
    return train, select(sections, *group.valid), select(sections, *group.test)


def make_batches(sections: list[CrossSection], max_batch: int = 64) -> list[Batch]:
    """Stack consecutive sections of equal size whose labels are complete.

    A section with partially missing labels becomes its own batch so the
    loss can drop the unlabeled stocks.
    """
    batches, run = [], []

    def flush():
        if run:
            batches.append(Batch(list(run), np.stack([s.F for s in run]),
                                 np.stack([s.industries for s in run]),
                                 np.stack([s.returns for s in run])))
            run.clear()

    for s in sections:
        complete = bool(np.isfinite(s.returns).all())
        if run and (s.n != run[0].n or not complete or len(run) >= max_batch):
            flush()
        run.append(s)
        if not complete:
            flush()
    flush()
    return batches


def audit_point_in_time(sections: list[CrossSection], calendar: TradingCalendar) -> list[str]:
    """Check every section's date stamps; empty list means no lookahead."""
    problems = []
    for s in sections:
        if s.feature_date > s.date:
            problems.append(f"{s.date}: features dated {s.feature_date} are from the future")
        for k, end in zip(s.horizons, s.label_ends):
            if end is None:
                if np.isfinite(s.returns[s.horizons.index(k)]).any():
                    problems.append(f"{s.date}: k={k} label present past the calendar end")
                continue
            if calendar.index(end) - s.t != k:
                problems.append(f"{s.date}: k={k} label window ends at {end}")
    return problems
