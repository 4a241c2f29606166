"""DKT-style recurrent knowledge-tracing backbone.

The model embeds each (concept, response) step, runs a gated recurrent
cell, and maps every hidden state through a dense output layer to one
correctness probability per concept.  The output layer is the *dynamic
layer*: callers may substitute per-learner weight and bias.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numcore as nc
from .data import Window
from .layers import gru, gru_params, step_mask, uniform, zeros
from .metrics import UndefinedMetricError, auc
from .numcore import Adam, Tape, Value

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


class EmptyLossError(ValueError):
    pass


@dataclass
class KnowledgeState:
    proficiency: np.ndarray
    step: int


@dataclass
class DynamicLayerParams:
    """Replacement output layer; leading batch axes allowed (one set per learner)."""

    weight: Value
    bias: Value


@dataclass
class Batch:
    concepts: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "Batch":
        return cls(np.stack([w.concepts for w in windows]),
                   np.stack([w.responses for w in windows]),
                   np.stack([w.timestamps for w in windows]),
                   np.array([w.length for w in windows], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def steps(self) -> int:
        return self.concepts.shape[1]

    def select(self, idx) -> "Batch":
        return Batch(self.concepts[idx], self.responses[idx], self.timestamps[idx], self.lengths[idx])

    def prefix(self, lengths: np.ndarray) -> "Batch":
        """Keep only the first ``lengths[b]`` steps of every row."""
        keep = step_mask(lengths, self.steps).astype(bool)
        return Batch(np.where(keep, self.concepts, 0), np.where(keep, self.responses, 0),
                     np.where(keep, self.timestamps, 0), np.asarray(lengths, dtype=np.int64).copy())


class DKT:
    """Recurrent KT backbone.

    Parameters
    ----------
    num_concepts : int
        Number of remapped concepts; also the output width ``d_out``.
    d : int
        Embedding size.
    d_in : int
        Hidden size of the recurrent cell, i.e. the dynamic layer's input width.
    seed : int
        Initialisation seed.
    """

    def __init__(self, num_concepts: int, d: int = 32, d_in: int = 64, seed: int = 0):
        self.num_concepts = num_concepts
        self.d = d
        self.d_in = d_in
        self.seed = seed
        self.trained = False
        rng = np.random.default_rng(seed)
        emb = rng.normal(0.0, 0.1, size=(num_concepts + 1, d))
        emb[0] = 0.0
        self.params: dict[str, Value] = {
            "concept_emb": Value(emb, requires_grad=True, name="concept_emb"),
            "response_emb": Value(rng.normal(0.0, 0.1, size=(2, d)), requires_grad=True, name="response_emb"),
            **gru_params(rng, d, d_in, "cell"),
            "out.weight": uniform(rng, (d_in, num_concepts), 1.0 / np.sqrt(d_in), "out.weight"),
            "out.bias": zeros((num_concepts,), "out.bias"),
        }
        self.adapter: dict[str, Value] | None = None

    @property
    def d_out(self) -> int:
        return self.num_concepts

    def parameters(self) -> list[Value]:
        ps = list(self.params.values())
        if self.adapter:
            ps += list(self.adapter.values())
        return ps

    def named_parameters(self) -> dict[str, Value]:
        out = dict(self.params)
        if self.adapter:
            out.update(self.adapter)
        return out

    def bias_parameters(self) -> list[Value]:
        return [p for n, p in self.named_parameters().items() if n.endswith("bias") or ".b_" in n]

    def output_layer(self) -> DynamicLayerParams:
        return DynamicLayerParams(self.params["out.weight"], self.params["out.bias"])

    def copy(self) -> "DKT":
        return copy.deepcopy(self)

    def add_adapter(self, bottleneck: int, seed: int = 0) -> None:
        """Residual bottleneck after the recurrent cell; identity until trained."""
        if not 0 < bottleneck < self.d_in:
            raise ValueError(f"adapter bottleneck must be in (0, {self.d_in}), got {bottleneck}")
        rng = np.random.default_rng(seed)
        self.adapter = {
            "adapter.down.weight": uniform(rng, (self.d_in, bottleneck), 1.0 / np.sqrt(self.d_in),
                                           "adapter.down.weight"),
            "adapter.down.bias": zeros((bottleneck,), "adapter.down.bias"),
            "adapter.up.weight": zeros((bottleneck, self.d_in), "adapter.up.weight"),
            "adapter.up.bias": zeros((self.d_in,), "adapter.up.bias"),
        }

    # ------------------------------------------------------------ forward

    def hidden(self, batch: Batch) -> Value:
        """Hidden state after each step, shape (batch, steps, d_in)."""
        if batch.concepts.size and batch.concepts.max() > self.num_concepts:
            raise IndexError(f"concept id {batch.concepts.max() - 1} outside model range {self.num_concepts}")
        p = self.params
        mask = step_mask(batch.lengths, batch.steps)[..., None]
        x = nc.embedding(p["concept_emb"], batch.concepts) + nc.embedding(p["response_emb"], batch.responses) * mask
        h = gru(x, p["cell.w_ih"], p["cell.w_hh"], p["cell.b_ih"], p["cell.b_hh"])
        if self.adapter:
            a = self.adapter
            z = nc.tanh(h @ a["adapter.down.weight"] + a["adapter.down.bias"])
            h = h + (z @ a["adapter.up.weight"] + a["adapter.up.bias"])
        return h

    def logits(self, hidden: Value, override: DynamicLayerParams | None = None) -> Value:
        layer = override or self.output_layer()
        w, b = layer.weight, layer.bias
        if b.ndim == 2:
            b = nc.reshape(b, (b.shape[0], 1, b.shape[1]))
        return hidden @ w + b


def next_step_logits(logits: Value, concepts: np.ndarray) -> Value:
    """Logit used to predict step i+1 from the state after step i.

    ``logits`` is (batch, steps, d_out); the result is (batch, steps-1) and
    entry j predicts step j+1 (0-based).
    """
    d_out = logits.shape[-1]
    nxt = concepts[:, 1:]
    onehot = np.zeros(nxt.shape + (d_out,))
    b, t = np.nonzero(nxt)
    onehot[b, t, nxt[b, t] - 1] = 1.0
    return nc.sum_(logits[:, :-1] * onehot, axis=-1)


def prediction_mask(lengths: np.ndarray, steps: int, start: np.ndarray | int = 1) -> np.ndarray:
    """Mask over next-step predictions for targets at 0-based steps ``start..length-1``."""
    target = np.arange(1, steps)[None, :]
    start = np.broadcast_to(np.asarray(start), (len(lengths),))[:, None]
    return ((target >= start) & (target < np.asarray(lengths)[:, None])).astype(np.float64)


def bce_loss(predictions: Value, targets, mask, reduction: str = "sum") -> Value:
    """Binary cross-entropy over unmasked steps; probabilities clamped to [1e-7, 1-1e-7]."""
    predictions = nc.as_value(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        raise EmptyLossError("every step is masked; nothing to score")
    p = nc.clip(predictions, PROB_EPS, 1.0 - PROB_EPS)
    ll = nc.log(p) * (targets * mask) + nc.log(1.0 - p) * ((1.0 - targets) * mask)
    total = -nc.sum_(ll)
    if reduction == "mean":
        return total * (1.0 / n)
    return total


def window_loss(model: DKT, batch: Batch, override: DynamicLayerParams | None = None,
                start: np.ndarray | int = 1, hidden: Value | None = None) -> Value:
    h = model.hidden(batch) if hidden is None else hidden
    z = next_step_logits(model.logits(h, override), batch.concepts)
    return bce_loss(nc.sigmoid(z), batch.responses[:, 1:], prediction_mask(batch.lengths, batch.steps, start))


def predict(model: DKT, batch: Batch, override: DynamicLayerParams | None = None,
            start: np.ndarray | int = 1, hidden: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (probabilities, labels) over the scored steps, no recording."""
    h = model.hidden(batch) if hidden is None else Value(hidden)
    z = next_step_logits(model.logits(h, override), batch.concepts)
    p = nc.sigmoid(z).data
    m = prediction_mask(batch.lengths, batch.steps, start).astype(bool)
    return p[m], batch.responses[:, 1:][m]


def forward(model: DKT, window: Window, override: DynamicLayerParams | None = None) -> list[KnowledgeState]:
    """Knowledge state after each unpadded step of one window."""
    states = knowledge_states(model, [window], override)[0]
    return [KnowledgeState(states[t], t + 1) for t in range(window.length)]


def knowledge_states(model: DKT, windows: Sequence[Window] | Batch,
                     override: DynamicLayerParams | None = None) -> np.ndarray:
    batch = windows if isinstance(windows, Batch) else Batch.from_windows(windows)
    return nc.sigmoid(model.logits(model.hidden(batch), override)).data


def knowledge_state_at(model: DKT, window: Window, t: int) -> KnowledgeState:
    """State after consuming steps 1..t (1-based)."""
    if not 1 <= t <= window.length:
        raise IndexError(f"step {t} outside 1..{window.length}")
    states = knowledge_states(model, [window.prefix(t)])[0]
    return KnowledgeState(states[t - 1], t)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainingLog:
    valid_auc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = -np.inf

    def watermark(self) -> list[float]:
        return list(np.maximum.accumulate(self.valid_auc)) if self.valid_auc else []


def valid_auc(model: DKT, batch: Batch, override=None, start=1, hidden=None) -> float:
    p, y = predict(model, batch, override, start, hidden)
    try:
        return auc(p, y)
    except UndefinedMetricError:
        return 0.5


def fit(params: list[Value], loss_fn, n_items: int, evaluate, config: TrainConfig,
        on_step=None) -> TrainingLog:
    """Shared early-stopping loop.

    ``loss_fn(idx)`` builds the loss for a mini-batch of item indices inside
    an active tape; ``evaluate()`` returns the score to maximise after each
    epoch.  The best epoch's parameters are restored at the end.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(params, lr=config.lr)
    tlog = TrainingLog()
    best = [p.data.copy() for p in params]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n_items)
        total = 0.0
        for bi, lo in enumerate(range(0, n_items, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            with Tape() as tape:
                loss = loss_fn(idx)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
                nc.backward(loss)
            tape.release()
            if on_step is not None:
                on_step()
            opt.step()
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingError(f"non-finite parameters after epoch {epoch}, batch {bi}")
            total += float(loss.data)
        score = evaluate()
        tlog.train_loss.append(total)
        tlog.valid_auc.append(score)
        if score > tlog.best_auc:
            tlog.best_auc, tlog.best_epoch = score, epoch
            best = [p.data.copy() for p in params]
        log.debug("epoch %d loss %.4f valid %.4f", epoch, total, score)
        if epoch - tlog.best_epoch >= config.patience:
            break
    for p, b in zip(params, best):
        p.data[...] = b
    return tlog


def train(model: DKT, train_windows: Sequence[Window], valid_windows: Sequence[Window],
          config: TrainConfig | None = None) -> tuple[DKT, TrainingLog]:
    """Adam over shuffled mini-batches with early stopping on validation AUC."""
    config = config or TrainConfig()
    if not train_windows or not valid_windows:
        raise ValueError("train and valid splits must be nonempty")
    tb = Batch.from_windows(train_windows)
    vb = Batch.from_windows(valid_windows)
    tlog = fit(model.parameters(), lambda idx: window_loss(model, tb.select(idx)), len(tb),
               lambda: valid_auc(model, vb), config)
    model.trained = True
    return model, tlog


# --------------------------------------------------------------- checkpoints

def save(model: DKT, path, extra: dict | None = None) -> None:
    meta = {"num_concepts": model.num_concepts, "d": model.d, "d_in": model.d_in,
            "seed": model.seed, "trained": int(model.trained), **(extra or {})}
    checkpoint.save(path, "backbone", meta, {n: p.data for n, p in model.named_parameters().items()})


def load(path) -> DKT:
    kind, meta, arrays = checkpoint.load(path)
    if kind != "backbone":
        raise checkpoint.CheckpointError(f"{path}: expected a backbone checkpoint, found {kind}")
    model = DKT(int(meta["num_concepts"]), int(meta["d"]), int(meta["d_in"]), int(meta["seed"]))
    model.trained = bool(int(meta["trained"]))
    if any(n.startswith("adapter.") for n in arrays):
        model.add_adapter(arrays["adapter.down.bias"].shape[0])
    for n, p in model.named_parameters().items():
        p.data[...] = arrays[n]
    return model
