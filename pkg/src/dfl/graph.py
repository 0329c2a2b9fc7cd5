"""Per-date industry and universe stock graphs and their summary statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import UniverseSnapshot


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphSnapshot:
    """Dense masks for one date; row/column order follows ``ids``."""

    date: str
    ids: tuple[str, ...]
    industries: np.ndarray
    industry_mask: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def universe_mask(self) -> np.ndarray:
        return np.ones((self.n, self.n))


def industry_mask(industries: np.ndarray) -> np.ndarray:
    """1 where two stocks share an industry label (diagonal included)."""
    ind = np.asarray(industries)
    return (ind[..., :, None] == ind[..., None, :]).astype(np.float64)


def _check_labels(universe: UniverseSnapshot) -> np.ndarray:
    labels = np.asarray(universe.industries)
    if labels.shape != (universe.n,):
        raise GraphError(f"{universe.date}: expected {universe.n} industry labels")
    if labels.dtype.kind == "f" and np.isnan(labels).any():
        raise GraphError(f"{universe.date}: missing industry label")
    if (labels < 1).any():
        raise GraphError(f"{universe.date}: industry labels must be positive integers")
    return labels.astype(np.int64)


def build_industry_mask(universe: UniverseSnapshot) -> GraphSnapshot:
    labels = _check_labels(universe)
    return GraphSnapshot(universe.date, universe.ids, labels, industry_mask(labels))


def build_universe_mask(universe: UniverseSnapshot) -> np.ndarray:
    return np.ones((universe.n, universe.n))


def edge_stats(snapshots) -> list[tuple[str, float]]:
    """Average same-industry neighbours per stock, self-loops excluded."""
    out = []
    for g in snapshots:
        # each stock has (industry size - 1) neighbours
        sizes = np.array(list(Counter(g.industries.tolist()).values()), dtype=np.float64)
        out.append((g.date, float((sizes * (sizes - 1)).sum() / g.n)))
    return out


def industry_proportions(snapshots) -> list[tuple[str, dict[int, float]]]:
    out = []
    for g in snapshots:
        counts = Counter(int(x) for x in g.industries)
        out.append((g.date, {k: counts[k] / g.n for k in sorted(counts)}))
    return out
