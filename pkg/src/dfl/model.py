"""Deep multi-factor network and its neural baselines.

Shapes carry an optional leading date axis: ``F`` is ``(..., n, m)`` and the
industry mask ``(..., n, n)``, so a batch of equally sized cross-sections runs
through a single recorded graph.  No parameter shape depends on ``n``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

CHECKPOINT_FORMAT = "dfl-checkpoint"
CHECKPOINT_VERSION = 1
ZSCORE_EPS = 1e-8


@dataclass
class ModelConfig:
    hidden: int = 32
    gat_heads: int = 1
    attn_slope: float = 0.2
    slope: float = 0.01
    horizons: tuple[int, ...] = (3, 5, 10, 15, 20)
    seed: int = 0

    def __post_init__(self):
        self.horizons = tuple(int(k) for k in self.horizons)
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if not (0 < self.attn_slope < 1 and 0 < self.slope < 1):
            raise ValueError("leaky-relu slopes must lie in (0, 1)")
        if not self.horizons or list(self.horizons) != sorted(set(self.horizons)):
            raise ValueError("horizons must be non-empty, unique and ascending")
        if self.gat_heads < 1 or self.hidden % self.gat_heads:
            raise ValueError("hidden width must be divisible by the number of GAT heads")


@dataclass
class ModelOutput:
    factors: dict[int, Tensor]                       # (..., n) deep factor per horizon
    estimates: dict[int, Tensor] | None = None       # (..., n) attention estimate
    attention: dict[int, Tensor] | None = None       # (..., m) mean attention weights
    contexts: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class DeepFactorSet:
    date: str
    factors: dict[int, np.ndarray]
    estimates: dict[int, np.ndarray]
    attention: dict[int, np.ndarray]


# ---------------------------------------------------------------------------
# building blocks

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def standardize(x: Tensor, axis: int = -2, eps: float = ZSCORE_EPS) -> Tensor:
    """Cross-sectional z-score (population std) along ``axis``."""
    mu, sd = ad.reduce_stats(x, axis=axis, keepdims=True)
    return (x - mu) / (sd + eps)


def linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def init_encoder(ps: ParamSet, rng, m: int, hidden: int) -> None:
    ps.new("enc.bn_scale", np.ones(m))
    ps.new("enc.bn_shift", np.zeros(m))
    ps.new("enc.l1.w", _uniform(rng, (m, hidden), m))
    ps.new("enc.l1.b", _uniform(rng, (hidden,), m))
    ps.new("enc.l2.w", _uniform(rng, (hidden, hidden), hidden))
    ps.new("enc.l2.b", _uniform(rng, (hidden,), hidden))


def encode_context(F, p: dict[str, Tensor], slope: float) -> Tensor:
    """z-score each factor across stocks, learnable affine, then a 2-layer MLP."""
    z = standardize(ad.as_tensor(F)) * p["enc.bn_scale"] + p["enc.bn_shift"]
    h = ad.leaky_relu(linear(z, p, "enc.l1"), slope)
    return ad.leaky_relu(linear(h, p, "enc.l2"), slope)


def init_gat(ps: ParamSet, rng, prefix: str, d_in: int, d_out: int, heads: int) -> None:
    dh = d_out // heads
    for h in range(heads):
        ps.new(f"{prefix}.h{h}.w", _uniform(rng, (d_in, dh), d_in))
        ps.new(f"{prefix}.h{h}.a_src", _uniform(rng, (dh, 1), 2 * dh))
        ps.new(f"{prefix}.h{h}.a_dst", _uniform(rng, (dh, 1), 2 * dh))
    ps.new(f"{prefix}.bias", np.zeros(d_out))


def gat_influence(H: Tensor, mask, p: dict[str, Tensor], prefix: str, heads: int,
                  slope: float = 0.2) -> Tensor:
    """Graph attention restricted to ``mask`` (``None`` means every pair).

    Per head: ``e_ij = leaky(a_src . Wh_i + a_dst . Wh_j)``, which equals
    ``a^T [Wh_i || Wh_j]``; attention is the masked row softmax of ``e`` and
    node i receives ``sum_j alpha_ij Wh_j``.  Heads are concatenated.
    """
    outs = []
    for h in range(heads):
        Wh = H @ p[f"{prefix}.h{h}.w"]
        src = Wh @ p[f"{prefix}.h{h}.a_src"]
        dst = Wh @ p[f"{prefix}.h{h}.a_dst"]
        scores = ad.leaky_relu(src + dst.T, slope)
        alpha = ad.softmax(scores, axis=-1) if mask is None else ad.masked_softmax(scores, mask, axis=-1)
        outs.append(alpha @ Wh)
    return ad.concat(outs, axis=-1) + p[f"{prefix}.bias"]


def neutralize(context: Tensor, influence: Tensor) -> Tensor:
    context, influence = ad.as_tensor(context), ad.as_tensor(influence)
    if context.shape != influence.shape:
        raise ad.ShapeError(f"cannot neutralize {context.shape} by {influence.shape}")
    return context - influence


def factor_heads(X: Tensor, p: dict[str, Tensor], horizons, slope: float | None) -> dict[int, Tensor]:
    """One single-layer head per horizon; ``slope=None`` leaves the head linear."""
    W = ad.concat([p[f"head.k{k}.w"] for k in horizons], axis=1)
    b = ad.concat([p[f"head.k{k}.b"] for k in horizons], axis=0)
    out = X @ W + b
    if slope is not None:
        out = ad.leaky_relu(out, slope)
    return {k: out[..., i] for i, k in enumerate(horizons)}


def init_heads(ps: ParamSet, rng, d_in: int, horizons) -> None:
    for k in horizons:
        ps.new(f"head.k{k}.w", _uniform(rng, (d_in, 1), d_in))
        ps.new(f"head.k{k}.b", np.zeros(1))


def factor_attention(F, p: dict[str, Tensor], k: int, slope: float):
    """Attention of stocks over the original factors for horizon ``k``.

    Returns ``(A, a_bar, f_hat)``: per-stock weights over the m factors (rows
    sum to 1), their cross-sectional mean, and the reconstruction ``F @ a_bar``.
    """
    F = ad.as_tensor(F)
    U = ad.leaky_relu(F @ p[f"fattn.k{k}.w"] + p[f"fattn.k{k}.b"], slope)
    A = ad.softmax(U, axis=-1)
    a_bar = ad.mean(A, axis=-2)
    f_hat = ad.reshape(F @ ad.reshape(a_bar, a_bar.shape + (1,)), F.shape[:-1])
    return A, a_bar, f_hat


# ---------------------------------------------------------------------------
# models

class NeuralFactorModel:
    kind = "neural"

    def __init__(self, n_factors: int, config: ModelConfig | None = None, params: ParamSet | None = None):
        self.n_factors = n_factors
        self.config = config or ModelConfig()
        self.params = params if params is not None else self.init_params(np.random.default_rng(self.config.seed))

    def init_params(self, rng) -> ParamSet:
        raise NotImplementedError

    def forward(self, F, mask, leaves: dict[str, Tensor] | None = None) -> ModelOutput:
        raise NotImplementedError

    def predict(self, F, mask) -> ModelOutput:
        return self.forward(F, mask, self.params.leaves(record=False))

    def score(self, section, horizon: int) -> np.ndarray:
        return self.predict(section.F, section.graph.industry_mask).factors[horizon].value

    def param_count(self) -> int:
        return self.params.count()


class DMFM(NeuralFactorModel):
    """Encoder -> industry GAT -> neutralize -> universe GAT -> neutralize -> heads."""

    kind = "dmfm"

    def init_params(self, rng) -> ParamSet:
        c, m = self.config, self.n_factors
        ps = ParamSet()
        init_encoder(ps, rng, m, c.hidden)
        init_gat(ps, rng, "gat_ind", c.hidden, c.hidden, c.gat_heads)
        init_gat(ps, rng, "gat_uni", c.hidden, c.hidden, c.gat_heads)
        init_heads(ps, rng, 3 * c.hidden, c.horizons)
        for k in c.horizons:
            ps.new(f"fattn.k{k}.w", _uniform(rng, (m, m), m))
            ps.new(f"fattn.k{k}.b", np.zeros(m))
        return ps

    def forward(self, F, mask, leaves=None) -> ModelOutput:
        c = self.config
        p = leaves if leaves is not None else self.params.leaves(record=False)
        C = encode_context(F, p, c.slope)
        H_I = gat_influence(C, mask, p, "gat_ind", c.gat_heads, c.attn_slope)
        C_I = neutralize(C, H_I)
        H_U = gat_influence(C_I, None, p, "gat_uni", c.gat_heads, c.attn_slope)
        C_U = neutralize(C_I, H_U)
        factors = factor_heads(ad.concat([C, C_I, C_U], axis=-1), p, c.horizons, c.slope)
        estimates, attention = {}, {}
        for k in c.horizons:
            _, attention[k], estimates[k] = factor_attention(F, p, k, c.slope)
        return ModelOutput(factors, estimates, attention,
                           {"C": C, "H_I": H_I, "C_I": C_I, "H_U": H_U, "C_U": C_U})

    def deep_factor_set(self, section) -> DeepFactorSet:
        out = self.predict(section.F, section.graph.industry_mask)
        return DeepFactorSet(section.date,
                             {k: v.value for k, v in out.factors.items()},
                             {k: v.value for k, v in out.estimates.items()},
                             {k: v.value for k, v in out.attention.items()})


class MLPModel(NeuralFactorModel):
    """Context encoder followed by a linear head per horizon."""

    kind = "mlp"

    def init_params(self, rng) -> ParamSet:
        ps = ParamSet()
        init_encoder(ps, rng, self.n_factors, self.config.hidden)
        init_heads(ps, rng, self.config.hidden, self.config.horizons)
        return ps

    def forward(self, F, mask, leaves=None) -> ModelOutput:
        p = leaves if leaves is not None else self.params.leaves(record=False)
        C = encode_context(F, p, self.config.slope)
        return ModelOutput(factor_heads(C, p, self.config.horizons, None), contexts={"C": C})


class MGATModel(NeuralFactorModel):
    """Context encoder, universe-graph GAT, and a linear head on ``C || H_U``."""

    kind = "mgat"

    def init_params(self, rng) -> ParamSet:
        c = self.config
        ps = ParamSet()
        init_encoder(ps, rng, self.n_factors, c.hidden)
        init_gat(ps, rng, "gat_uni", c.hidden, c.hidden, c.gat_heads)
        init_heads(ps, rng, 2 * c.hidden, c.horizons)
        return ps

    def forward(self, F, mask, leaves=None) -> ModelOutput:
        c = self.config
        p = leaves if leaves is not None else self.params.leaves(record=False)
        C = encode_context(F, p, c.slope)
        H_U = gat_influence(C, None, p, "gat_uni", c.gat_heads, c.attn_slope)
        return ModelOutput(factor_heads(ad.concat([C, H_U], axis=-1), p, c.horizons, None),
                           contexts={"C": C, "H_U": H_U})


NEURAL_MODELS = {cls.kind: cls for cls in (DMFM, MLPModel, MGATModel)}


def build_model(kind: str, n_factors: int, config: ModelConfig):
    from .baselines import BASELINES
    if kind in NEURAL_MODELS:
        return NEURAL_MODELS[kind](n_factors, config)
    if kind in BASELINES:
        return BASELINES[kind](n_factors, horizon=max(config.horizons))
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path, meta: dict | None = None) -> Path:
    """Versioned JSON: config plus named parameter arrays (flat, with shapes)."""
    path = Path(path)
    if isinstance(model, NeuralFactorModel):
        config = asdict(model.config)
        config["horizons"] = list(config["horizons"])
        params = {name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                  for name, v in model.params.values().items()}
    else:
        config, params = model.to_config(), {
            name: {"shape": list(np.shape(v)), "values": np.ravel(v).tolist()}
            for name, v in model.arrays().items()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": model.kind,
           "n_factors": model.n_factors, "config": config, "params": params, "meta": meta or {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    from .baselines import BASELINES
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    kind = doc["kind"]
    if kind in NEURAL_MODELS:
        model = NEURAL_MODELS[kind](doc["n_factors"], ModelConfig(**doc["config"]))
        if set(arrays) != set(model.params.names()):
            raise ValueError(f"{path}: parameter names do not match a {kind} model")
        model.params.assign(arrays)
        return model
    if kind in BASELINES:
        return BASELINES[kind].from_config(doc["n_factors"], doc["config"], arrays)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
