"""Linear and equal-weight factor-combination baselines."""

from __future__ import annotations

import numpy as np

RIDGE_LAMBDA = 1e-6


def zscore_columns(F: np.ndarray) -> np.ndarray:
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    return np.divide(F - mu, sd, out=np.zeros_like(F), where=sd > 0)


def _label_rows(sections, horizon):
    for s in sections:
        r = s.returns[s.horizons.index(horizon)]
        ok = np.isfinite(r)
        if ok.sum() >= 3:
            yield s, r, ok


class LinearModel:
    """Pooled cross-sectional OLS of forward returns on raw exposures."""

    kind = "linear"

    def __init__(self, n_factors: int, horizon: int = 20, weights=None):
        self.n_factors = n_factors
        self.horizon = horizon
        self.weights = np.zeros(n_factors) if weights is None else np.asarray(weights, dtype=np.float64)
        self.used_ridge = False

    def fit(self, sections) -> "LinearModel":
        X, y = [], []
        for s, r, ok in _label_rows(sections, self.horizon):
            F = s.F[ok]
            X.append(F - F.mean(axis=0))
            y.append(r[ok] - r[ok].mean())
        if not X:
            raise ValueError("no labelled training dates for the linear baseline")
        X, y = np.vstack(X), np.concatenate(y)
        gram = X.T @ X
        if np.linalg.matrix_rank(gram) < self.n_factors or np.linalg.cond(gram) > 1e12:
            self.used_ridge = True
            self.weights = np.linalg.solve(gram + RIDGE_LAMBDA * np.eye(self.n_factors), X.T @ y)
        else:
            self.weights = np.linalg.lstsq(X, y, rcond=None)[0]
        return self

    def score(self, section, horizon: int | None = None) -> np.ndarray:
        return section.F @ self.weights

    def to_config(self) -> dict:
        return {"horizon": self.horizon}

    def arrays(self) -> dict:
        return {"weights": self.weights}

    @classmethod
    def from_config(cls, n_factors, config, arrays):
        return cls(n_factors, config["horizon"], arrays["weights"])


class EWModel:
    """Equal-weight blend of z-scored factors, each signed by its training IC."""

    kind = "ew"

    def __init__(self, n_factors: int, horizon: int = 20, signs=None):
        self.n_factors = n_factors
        self.horizon = horizon
        self.signs = np.ones(n_factors) if signs is None else np.asarray(signs, dtype=np.float64)

    def fit(self, sections) -> "EWModel":
        ics = []
        for s, r, ok in _label_rows(sections, self.horizon):
            Z = zscore_columns(s.F[ok])
            rz = r[ok] - r[ok].mean()
            denom = np.sqrt((Z ** 2).mean(axis=0)) * rz.std()
            ics.append(np.divide((Z * rz[:, None]).mean(axis=0), denom,
                                 out=np.zeros(self.n_factors), where=denom > 0))
        if ics:
            self.signs = np.where(np.mean(ics, axis=0) >= 0, 1.0, -1.0)
        return self

    def score(self, section, horizon: int | None = None) -> np.ndarray:
        return (zscore_columns(section.F) * self.signs).mean(axis=1)

    def to_config(self) -> dict:
        return {"horizon": self.horizon}

    def arrays(self) -> dict:
        return {"signs": self.signs}

    @classmethod
    def from_config(cls, n_factors, config, arrays):
        return cls(n_factors, config["horizon"], arrays["signs"])


BASELINES = {cls.kind: cls for cls in (LinearModel, EWModel)}
