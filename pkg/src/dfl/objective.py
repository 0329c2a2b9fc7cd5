"""Training objective (IC, ICIR, factor return, attention deviation) and trainer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .dataset import CrossSection, group_sections, make_batches
from .model import ModelOutput, standardize

logger = logging.getLogger(__name__)

EPS = 1e-8


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss terms; all accept an optional leading date axis

def information_coefficient(f, r, eps: float = EPS) -> Tensor:
    """Cross-sectional Pearson correlation along the last axis."""
    f = ad.as_tensor(f)
    r = np.asarray(r, dtype=np.float64)
    if f.shape != r.shape:
        raise ad.ShapeError(f"IC operands differ in shape: {f.shape} vs {r.shape}")
    mf, sf = ad.reduce_stats(f, axis=-1)
    rc = r - r.mean(axis=-1, keepdims=True)
    sr = r.std(axis=-1)
    cov = ad.mean((f - ad.reshape(mf, mf.shape + (1,))) * rc, axis=-1)
    return cov / ((sf + eps) * (sr + eps))


def icir(ics, eps: float = EPS) -> Tensor:
    """Mean over sample standard deviation of an IC series."""
    ics = ad.as_tensor(ics)
    T = ics.shape[-1]
    if T < 2:
        raise ValueError("ICIR needs at least two ICs")
    mu, sd = ad.reduce_stats(ics, axis=-1)
    return mu / (sd * math.sqrt(T / (T - 1)) + eps)


def factor_return(f, r, standardize_factor: bool = True, eps: float = EPS) -> Tensor:
    """Least-squares slope of ``r`` on ``f`` through the origin.

    With ``standardize_factor`` the factor is z-scored first, which makes the
    slope invariant to the factor's scale.
    """
    f = ad.as_tensor(f)
    r = np.asarray(r, dtype=np.float64)
    if standardize_factor:
        f = standardize(f, axis=-1, eps=eps)
    return ad.sum_(f * r, axis=-1) / (ad.sum_(f * f, axis=-1) + eps)


def attention_deviation(f, f_hat) -> Tensor:
    f, f_hat = ad.as_tensor(f), ad.as_tensor(f_hat)
    if f.shape != f_hat.shape:
        raise ad.ShapeError(f"deviation operands differ in shape: {f.shape} vs {f_hat.shape}")
    return ad.l2_norm(f - f_hat, axis=-1)


# ---------------------------------------------------------------------------
# composite loss

@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    window: int = 32
    epochs: int = 50
    patience: int = 5
    lambda_d: float = 1.0
    lambda_b: float = 1.0
    lambda_c: float = 1.0
    eps: float = 1e-8
    steps_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.patience < 1:
            raise ValueError("learning rate, epochs and patience must be positive")
        if self.window < 2:
            raise ValueError("window must cover at least two dates (ICIR)")


@dataclass
class LossBreakdown:
    dates: list[str]
    horizons: tuple[int, ...]
    d: np.ndarray      # dates x horizons
    b: np.ndarray      # dates x horizons
    ic: np.ndarray     # dates x horizons
    c: np.ndarray      # horizons
    total: float
    loss: Tensor = field(repr=False)

    def recompute(self, lambda_d=1.0, lambda_b=1.0, lambda_c=1.0) -> float:
        T, K = self.d.shape
        terms = lambda_d * self.d - lambda_b * self.b - lambda_c * self.c[None, :]
        return float(terms.sum() / (K * T))


def _chunk_terms(out: ModelOutput, returns: np.ndarray, horizons, eps):
    """Per-date IC, factor return and deviation for one forward chunk."""
    terms = {}
    for i, k in enumerate(horizons):
        f = out.factors[k]
        r = returns[:, i, :]
        if np.isfinite(r).all():
            fs, rs = f, r
        else:
            ok = np.flatnonzero(np.isfinite(r[0]))
            fs, rs = ad.take(f, ok, axis=-1), r[:, ok]
        ic = information_coefficient(fs, rs, eps)
        b = factor_return(fs, rs, True, eps)
        d = attention_deviation(f, out.estimates[k]) if out.estimates else None
        terms[k] = (ic, b, d)
    return terms


def total_loss(chunks, horizons, config: TrainConfig) -> LossBreakdown:
    """Combine forward chunks of one window into the training loss.

    ``chunks`` is a sequence of ``(dates, ModelOutput, returns)`` where
    ``returns`` has shape ``(B, K, n)``.  ICIR is taken over every date in the
    window, so its gradient couples all dates.
    """
    horizons = tuple(horizons)
    per_k = {k: ([], [], []) for k in horizons}
    dates = []
    for chunk_dates, out, returns in chunks:
        dates.extend(chunk_dates)
        for k, (ic, b, d) in _chunk_terms(out, returns, horizons, config.eps).items():
            per_k[k][0].append(ic)
            per_k[k][1].append(b)
            if d is not None:
                per_k[k][2].append(d)
    T, K = len(dates), len(horizons)
    if T < 2:
        raise ValueError("loss window needs at least two dated cross-sections")
    parts, ic_cols, b_cols, d_cols, c_vals = [], [], [], [], []
    for k in horizons:
        ics = ad.concat(per_k[k][0], axis=0)
        bs = ad.concat(per_k[k][1], axis=0)
        c = icir(ics, config.eps)
        term = -config.lambda_b * ad.sum_(bs) - (config.lambda_c * T) * c
        if per_k[k][2]:
            ds = ad.concat(per_k[k][2], axis=0)
            term = term + config.lambda_d * ad.sum_(ds)
            d_cols.append(ds.value)
        else:
            d_cols.append(np.zeros(T))
        parts.append(term)
        ic_cols.append(ics.value)
        b_cols.append(bs.value)
        c_vals.append(c.item())
    loss = parts[0]
    for p in parts[1:]:
        loss = loss + p
    loss = loss * (1.0 / (K * T))
    return LossBreakdown(dates, horizons, np.column_stack(d_cols), np.column_stack(b_cols),
                         np.column_stack(ic_cols), np.array(c_vals), loss.item(), loss)


def labelled(sections: list[CrossSection], warn: bool = True) -> list[CrossSection]:
    keep = [s for s in sections if s.has_labels()]
    if warn and len(keep) < len(sections):
        dropped = [s.date for s in sections if not s.has_labels()]
        logger.warning("excluded %d dates lacking forward returns (first %s)", len(dropped), dropped[0])
    return keep


def window_loss(model, sections: list[CrossSection], config: TrainConfig,
                leaves: dict[str, Tensor] | None = None, max_batch: int = 64) -> LossBreakdown:
    """Forward ``sections`` (in batches) and evaluate the composite loss."""
    if leaves is None:
        leaves = model.params.leaves(record=False)
    chunks = []
    for batch in make_batches(labelled(sections), max_batch=max_batch):
        out = model.forward(batch.F, batch.mask, leaves)
        chunks.append((batch.dates, out, batch.returns))
    return total_loss(chunks, model.config.horizons, config)


def _diagnose(bd: LossBreakdown) -> str:
    for t, date in enumerate(bd.dates):
        for j, k in enumerate(bd.horizons):
            for name, arr in (("d", bd.d), ("b", bd.b), ("ic", bd.ic)):
                if not np.isfinite(arr[t, j]):
                    return f"term {name} on {date} for k={k}"
    for j, k in enumerate(bd.horizons):
        if not np.isfinite(bd.c[j]):
            return f"term c (ICIR) for k={k} over window starting {bd.dates[0]}"
    return f"window starting {bd.dates[0]}"


# ---------------------------------------------------------------------------
# optimisation

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        updated = {}
        for name, g in grads.items():
            if not params[name].trainable:
                continue
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            updated[name] = params[name].tensor.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.assign(updated)


@dataclass
class TrainResult:
    params: ParamSet
    history: list[dict]
    best_epoch: int
    best_valid_loss: float


def fit(model, train_sections: list[CrossSection], valid_sections: list[CrossSection],
        config: TrainConfig, report_horizon: int = 20) -> TrainResult:
    """Adam over random consecutive-date windows; keep the best validation epoch."""
    train_sections = labelled(train_sections)
    valid_sections = labelled(valid_sections)
    if len(train_sections) < 2 or len(valid_sections) < 2:
        raise TrainingError("training and validation ranges need at least two labelled dates each")
    horizons = model.config.horizons
    k_report = report_horizon if report_horizon in horizons else max(horizons)
    j_report = horizons.index(k_report)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    window = min(config.window, len(train_sections))
    steps = config.steps_per_epoch or max(1, len(train_sections) // window)
    best = (math.inf, 0, model.params.copy())
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(steps):
            start = int(rng.integers(0, len(train_sections) - window + 1))
            leaves = model.params.leaves()
            bd = window_loss(model, train_sections[start:start + window], config, leaves)
            if not np.isfinite(bd.total):
                raise TrainingError(f"non-finite training loss at epoch {epoch}: {_diagnose(bd)}")
            grads = ad.backward(bd.loss, leaves)
            bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
            if bad:
                raise TrainingError(f"non-finite gradient for {bad[0]} at epoch {epoch}, "
                                    f"window starting {bd.dates[0]}")
            opt.step(model.params, grads)
            losses.append(bd.total)
        vb = window_loss(model, valid_sections, config)
        if not np.isfinite(vb.total):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}: {_diagnose(vb)}")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": vb.total,
                        "valid_mean_ic_k20": float(vb.ic[:, j_report].mean())})
        logger.info("epoch %d train %.6f valid %.6f ic %.4f", epoch, history[-1]["train_loss"],
                    vb.total, history[-1]["valid_mean_ic_k20"])
        if vb.total < best[0]:
            best = (vb.total, epoch, model.params.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.params = best[2]
    return TrainResult(best[2], history, best[1], best[0])


def train(model, group, sections: list[CrossSection], calendar, config: TrainConfig,
          max_horizon: int | None = None) -> TrainResult:
    """Train ``model`` on one split group of ``sections``."""
    k = max_horizon if max_horizon is not None else max(model.config.horizons)
    train_secs, valid_secs, _ = group_sections(sections, group, calendar, k)
    return fit(model, train_secs, valid_secs, config)
