"""Tuning-free parameter generator for the backbone's dynamic layer.

Pipeline, per learner context window::

    concepts, responses --dual embedding--> Q, R            (steps, d)
    Q, R --tanh projection + recurrent extractor--> H_q, H_r (steps, d_in)
    H_q, H_r --state-adaptive attention--> S_q, S_r         (steps, d_in)
    S_q + S_r, last unpadded row --> S_k                     (d_in,)
    S_k --low-rank synthesis--> weight (d_in, d_out), bias (d_out,)

Everything after training is a single feedforward pass.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numcore as nc
from .backbone import (DKT, Batch, DynamicLayerParams, TrainConfig, TrainingLog, fit,
                       next_step_logits, bce_loss, prediction_mask, valid_auc)
from .data import ValidationError, Window
from .layers import gru, gru_params, step_mask, uniform, zeros
from .numcore import Value

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    num_concepts: int
    d: int = 32
    d_in: int = 64
    heads: int = 4
    rank: int = 1
    dual: bool = True
    use_sfe: bool = True
    use_saa: bool = True
    attention: str = "saa"      # "saa" weights keys by attn_w, "sha" is plain attention
    causal: bool = True
    seed: int = 0

    @property
    def d_out(self) -> int:
        return self.num_concepts

    def validate(self) -> None:
        if self.use_saa and self.d_in % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide d_in={self.d_in}")
        if self.rank < 0 or self.rank > self.d_in // 2:
            raise ConfigError(f"rank must be in [0, d_in/2 = {self.d_in // 2}], got {self.rank}")
        if self.attention not in ("saa", "sha"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")


def generator_variant(base: GeneratorConfig, variant: str) -> GeneratorConfig:
    """Named ablations: full, wo_dual, wo_sfe, wo_saa, w_sha."""
    table = {
        "full": {},
        "wo_dual": {"dual": False},
        "wo_sfe": {"use_sfe": False},
        "wo_saa": {"use_saa": False},
        "w_sha": {"attention": "sha"},
    }
    if variant not in table:
        raise ConfigError(f"unknown generator variant {variant!r}; choose from {sorted(table)}")
    return replace(base, **table[variant])


# ------------------------------------------------------------ attention weights

def dist_d(concepts, responses, length: int) -> np.ndarray:
    """Change in the running correct rate of the current step's concept.

    Position 1, the first occurrence of a concept, and padding all get 1.
    """
    k = len(concepts)
    out = np.ones(k)
    seen: dict[int, int] = {}
    correct: dict[int, int] = {}
    for i in range(min(length, k)):
        c, r = int(concepts[i]), int(responses[i])
        n, s = seen.get(c, 0), correct.get(c, 0)
        if i > 0 and n > 0:
            # (s+r)/(n+1) - s/n + 1 over one integer denominator, so a single rounding
            den = n * (n + 1)
            out[i] = (n * r - s + den) / den
        seen[c], correct[c] = n + 1, s + r
    return out


def dist_t(concepts, timestamps, length: int) -> np.ndarray:
    """Time since the concept was last seen, relative to time since the window began.

    First occurrences, a zero denominator, and padding all get 1.
    """
    k = len(concepts)
    n = min(length, k)
    ts = np.asarray(timestamps[:n], dtype=np.int64)
    if n > 1 and np.any(np.diff(ts) < 0):
        raise ValidationError("timestamps must be nondecreasing")
    out = np.ones(k)
    last: dict[int, int] = {}
    for i in range(n):
        c = int(concepts[i])
        if c in last:
            denom = ts[i] - ts[0]
            if denom > 0:
                out[i] = (ts[i] - last[c]) / denom
        last[c] = int(ts[i])
    return out


def attn_weights(batch: Batch) -> np.ndarray:
    """Per-step key weights dist_d * dist_t, shape (batch, steps)."""
    out = np.ones(batch.concepts.shape)
    for b in range(len(batch)):
        n = int(batch.lengths[b])
        out[b] = (dist_d(batch.concepts[b], batch.responses[b], n)
                  * dist_t(batch.concepts[b], batch.timestamps[b], n))
    return out


def saa(x: Value, attn_w: np.ndarray | None, w_h: Value | None, heads: int,
        causal: bool = True) -> Value:
    """Multi-head self-attention with keys rescaled by ``attn_w`` after softmax.

    Queries, keys and values are the input split into ``heads`` slices; the
    scaled attention rows are not renormalised.  ``attn_w=None`` is plain
    attention.  ``x`` is (batch, steps, width).
    """
    width = x.shape[-1]
    if width % heads:
        raise ConfigError(f"heads={heads} does not divide width={width}")
    dh = width // heads
    steps = x.shape[1]
    mask = np.tril(np.ones((steps, steps), dtype=bool)) if causal else None
    outs = []
    for i in range(heads):
        xh = x[:, :, i * dh:(i + 1) * dh]
        scores = (xh @ nc.transpose(xh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        a = nc.softmax(scores, axis=-1, mask=mask)
        if attn_w is not None:
            a = a * attn_w[:, None, :]
        outs.append(a @ xh)
    cat = outs[0] if heads == 1 else nc.concat(outs, axis=-1)
    return cat @ w_h if w_h is not None else cat


def causal_mha(x: Value, w_h: Value | None, heads: int) -> Value:
    """Reference causal multi-head attention with the same head split."""
    return saa(x, None, w_h, heads, causal=True)


class Generator:
    """Parameter generator; see module docstring for the pipeline."""

    def __init__(self, config: GeneratorConfig, backbone: DKT | None = None):
        config.validate()
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, d_in, d_out = cfg.d, cfg.d_in, cfg.d_out
        qe = rng.normal(0.0, 0.1, size=(cfg.num_concepts + 1, d))
        qe[0] = 0.0
        p: dict[str, Value] = {
            "q_emb": Value(qe, requires_grad=True, name="q_emb"),
            "r_emb": Value(rng.normal(0.0, 0.1, size=(2, d)), requires_grad=True, name="r_emb"),
        }
        for tower in self.towers:
            p[f"{tower}.proj.weight"] = uniform(rng, (d_in, d), 1.0 / np.sqrt(d), f"{tower}.proj.weight")
            p[f"{tower}.proj.bias"] = zeros((d_in,), f"{tower}.proj.bias")
            if cfg.use_sfe:
                p.update(gru_params(rng, d_in, d_in, f"{tower}.sfe"))
        if cfg.use_saa:
            p["w_h"] = uniform(rng, (d_in, d_in), 1.0 / np.sqrt(d_in), "w_h")
        # synthesis starts from a zero map so the first generated layer equals b_w, b_b
        if cfg.rank == 0:
            p["w_w"] = zeros((d_in * d_out, d_in), "w_w")
        else:
            p["w_w1"] = uniform(rng, (cfg.rank, d_in), 1.0 / np.sqrt(d_in), "w_w1")
            p["w_w2"] = zeros((d_in * d_out, cfg.rank), "w_w2")
        p["b_w"] = zeros((d_in * d_out,), "b_w")
        p["w_b"] = zeros((d_out, d_in), "w_b")
        p["b_b"] = zeros((d_out,), "b_b")
        self.params = p
        if backbone is not None:
            self.anchor_to(backbone)

    @property
    def towers(self) -> tuple[str, ...]:
        return ("q", "r") if self.config.dual else ("x",)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameters(self) -> list[Value]:
        return list(self.params.values())

    def anchor_to(self, backbone: DKT) -> None:
        """Set the synthesis biases to the backbone's own output layer."""
        if (backbone.d_in, backbone.d_out) != (self.config.d_in, self.config.d_out):
            raise ConfigError("backbone dynamic layer does not match generator dimensions")
        self.params["b_w"].data[...] = backbone.params["out.weight"].data.reshape(-1)
        self.params["b_b"].data[...] = backbone.params["out.bias"].data

    def copy(self) -> "Generator":
        import copy
        return copy.deepcopy(self)

    # ----------------------------------------------------------- stages

    def embed_dual(self, batch: Batch) -> tuple[Value, Value]:
        """Question and response embeddings, zero at padded steps."""
        p = self.params
        if batch.concepts.size and batch.concepts.max() > self.config.num_concepts:
            raise IndexError("concept id outside generator range")
        mask = step_mask(batch.lengths, batch.steps)[..., None]
        q = nc.embedding(p["q_emb"], batch.concepts)
        r = nc.embedding(p["r_emb"], batch.responses) * mask
        return q, r

    def sfe(self, x: Value, tower: str) -> Value:
        p = self.params
        z = nc.tanh(x @ nc.transpose(p[f"{tower}.proj.weight"]) + p[f"{tower}.proj.bias"])
        if not self.config.use_sfe:
            return z
        return gru(z, p[f"{tower}.sfe.w_ih"], p[f"{tower}.sfe.w_hh"],
                   p[f"{tower}.sfe.b_ih"], p[f"{tower}.sfe.b_hh"])

    def attend(self, h: Value, weights: np.ndarray) -> Value:
        cfg = self.config
        if not cfg.use_saa:
            return h
        w = weights if cfg.attention == "saa" else None
        return saa(h, w, self.params["w_h"], cfg.heads, cfg.causal)

    def context_vector(self, batch: Batch) -> Value:
        """S_k for every row of ``batch``, shape (batch, d_in)."""
        if np.any(batch.lengths < 1):
            raise DegenerateInputError("empty context window")
        q, r = self.embed_dual(batch)
        weights = attn_weights(batch) if self.config.use_saa else None
        inputs = {"q": q, "r": r} if self.config.dual else {"x": q + r}
        s = None
        for tower, x in inputs.items():
            st = self.attend(self.sfe(x, tower), weights)
            s = st if s is None else s + st
        return fuse_last(s, batch.lengths)

    def synthesize(self, s_k: Value) -> DynamicLayerParams:
        return generate_params(s_k, self.params, self.config.rank, self.config.d_in, self.config.d_out)

    def __call__(self, batch: Batch) -> DynamicLayerParams:
        return self.synthesize(self.context_vector(batch))


def fuse(s_q: Value, s_r: Value, lengths) -> Value:
    if s_q.shape != s_r.shape:
        raise nc.ShapeError(f"fuse: shapes {s_q.shape} and {s_r.shape} differ")
    return fuse_last(s_q + s_r, lengths)


def fuse_last(s: Value, lengths) -> Value:
    """Row at the last unpadded step of each sequence, shape (batch, width)."""
    lengths = np.asarray(lengths)
    return s[np.arange(s.shape[0]), lengths - 1]


def generate_params(s_k: Value, params: dict[str, Value], rank: int, d_in: int,
                    d_out: int) -> DynamicLayerParams:
    """Weight (row-major over d_in, d_out) and bias from the context vector."""
    if rank > d_in // 2:
        raise ConfigError(f"rank {rank} exceeds d_in/2 = {d_in // 2}")
    lead = s_k.shape[:-1]
    if rank == 0:
        flat = s_k @ nc.transpose(params["w_w"]) + params["b_w"]
    else:
        flat = (s_k @ nc.transpose(params["w_w1"])) @ nc.transpose(params["w_w2"]) + params["b_w"]
    bias = s_k @ nc.transpose(params["w_b"]) + params["b_b"]
    return DynamicLayerParams(nc.reshape(flat, lead + (d_in, d_out)), bias)


def param_count(d: int, d_in: int, d_out: int, h: int, rank: int, num_concepts: int,
                dual: bool = True, use_sfe: bool = True, use_saa: bool = True) -> int:
    """Exact learnable-parameter count of a generator with this shape."""
    del h  # heads split d_in without adding parameters
    towers = 2 if dual else 1
    n = (num_concepts + 1) * d + 2 * d
    n += towers * (d_in * d + d_in)
    if use_sfe:
        n += towers * (2 * 3 * d_in * d_in + 2 * 3 * d_in)
    if use_saa:
        n += d_in * d_in
    n += d_in * d_in * d_out if rank == 0 else rank * d_in + d_in * d_out * rank
    n += d_in * d_out + d_out * d_in + d_out
    return n


# ---------------------------------------------------------------- adaptation

def context_lengths(lengths) -> np.ndarray:
    return np.maximum(1, np.asarray(lengths) // 2)


def adapt(generator: Generator, backbone: DKT, context: Window | Sequence[Window] | Batch
          ) -> DynamicLayerParams:
    """Generate dynamic-layer parameters from context windows, no recording, no mutation."""
    del backbone  # the generated layer plugs into it; nothing is read from it here
    if isinstance(context, Window):
        context = [context]
    batch = context if isinstance(context, Batch) else Batch.from_windows(context)
    if len(batch) == 0 or np.any(batch.lengths < 1):
        raise DegenerateInputError("empty context window")
    out = generator(batch)
    return DynamicLayerParams(Value(out.weight.data), Value(out.bias.data))


@dataclass
class GenTrainConfig(TrainConfig):
    joint: bool = False


def _split(batch: Batch) -> tuple[Batch, np.ndarray]:
    half = context_lengths(batch.lengths)
    return batch.prefix(half), half


def generator_loss(generator: Generator, backbone: DKT, batch: Batch, hidden=None) -> Value:
    """BCE on steps after the context half, with the generated output layer."""
    ctx, half = _split(batch)
    layer = generator(ctx)
    h = backbone.hidden(batch) if hidden is None else hidden
    z = next_step_logits(backbone.logits(h, layer), batch.concepts)
    mask = prediction_mask(batch.lengths, batch.steps, half)
    return bce_loss(nc.sigmoid(z), batch.responses[:, 1:], mask)


def adapted_predictions(generator: Generator, backbone: DKT, batch: Batch, hidden=None):
    """(probabilities, labels) on the second half of each window, adapted and frozen."""
    from .backbone import predict
    ctx, half = _split(batch)
    layer = adapt(generator, backbone, ctx)
    h = backbone.hidden(batch).data if hidden is None else hidden
    return predict(backbone, batch, layer, half, h), predict(backbone, batch, None, half, h)


def train_generator(generator: Generator, backbone: DKT, train_windows: Sequence[Window],
                    valid_windows: Sequence[Window], config: GenTrainConfig | None = None
                    ) -> tuple[Generator, TrainingLog]:
    """Fit the generator so adapted predictions on each window's second half improve.

    The backbone stays frozen unless ``config.joint``; its hidden states are
    then computed once up front.
    """
    config = config or GenTrainConfig()
    tw = [w for w in train_windows if w.length >= 2]
    vw = [w for w in valid_windows if w.length >= 2]
    if not tw or not vw:
        raise ValueError("generator training needs windows with at least 2 steps")
    tb, vb = Batch.from_windows(tw), Batch.from_windows(vw)
    params = generator.parameters()
    if config.joint:
        params = params + backbone.parameters()
        hidden_of = lambda idx: None
    else:
        cache = backbone.hidden(tb).data
        hidden_of = lambda idx: Value(cache[idx])
    v_hidden = backbone.hidden(vb).data

    def evaluate() -> float:
        ctx, half = _split(vb)
        layer = adapt(generator, backbone, ctx)
        h = None if config.joint else v_hidden
        return valid_auc(backbone, vb, layer, half, h)

    def loss_fn(idx):
        return generator_loss(generator, backbone, tb.select(idx), hidden_of(idx))

    tlog = fit(params, loss_fn, len(tb), evaluate, config)
    return generator, tlog


# --------------------------------------------------------------- checkpoints

def save(generator: Generator, path, extra: dict | None = None) -> None:
    meta = {k: (int(v) if isinstance(v, bool) else v) for k, v in asdict(generator.config).items()}
    meta.update(extra or {})
    checkpoint.save(path, "generator", meta, {n: p.data for n, p in generator.params.items()})


def load(path) -> Generator:
    kind, meta, arrays = checkpoint.load(path)
    if kind != "generator":
        raise checkpoint.CheckpointError(f"{path}: expected a generator checkpoint, found {kind}")
    kw = {}
    for key, field_type in GeneratorConfig.__annotations__.items():
        raw = meta[key]
        kw[key] = raw if field_type == "str" else (bool(int(raw)) if field_type == "bool" else int(raw))
    gen = Generator(GeneratorConfig(**kw))
    for n, p in gen.params.items():
        p.data[...] = arrays[n]
    return gen
