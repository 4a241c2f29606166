"""Learner value scoring and selection for parameter generation.

A learner's score is the product of two factors, each at least 1:

* a fine-grained factor, ``1 + KL(full || half)`` between the normalised
  knowledge states at the end and the middle of the window;
* a coarse factor from the change in overall correct rate between the first
  half and the whole window, weighted by how many steps were actually seen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .backbone import DKT, Batch, knowledge_states
from .data import Window
from .numcore import ContractError, ShapeError

STATE_EPS = 1e-12


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ValueScore:
    learner_id: int
    kl_factor: float
    zpd_factor: float

    @property
    def score(self) -> float:
        return self.kl_factor * self.zpd_factor


def fine_grained_change(state_half, state_full) -> float:
    """``1 + KL(norm(full) || norm(half))`` with entries clamped at 1e-12."""
    half = np.maximum(np.asarray(getattr(state_half, "proficiency", state_half), dtype=np.float64), STATE_EPS)
    full = np.maximum(np.asarray(getattr(state_full, "proficiency", state_full), dtype=np.float64), STATE_EPS)
    if half.shape != full.shape:
        raise ShapeError(f"state lengths differ: {half.shape} vs {full.shape}")
    half = half / half.sum()
    full = full / full.sum()
    return float(np.sum(full * np.log(full / half))) + 1.0


def zpd(responses, k: int, length: int, reliability: bool = True, divisor: str = "capacity") -> float:
    """Coarse change factor from correct rates.

    ``divisor="capacity"`` divides the sums by ``k`` and ``floor(k/2)`` as
    written; ``"observed"`` divides by the number of unpadded steps in each
    span instead.  Padded entries never count toward the sums.
    """
    if length <= 0:
        raise DegenerateInputError("zpd of an empty window")
    if length > k:
        raise ValueError(f"length {length} exceeds capacity {k}")
    r = np.zeros(k)
    r[:length] = np.asarray(responses, dtype=np.float64)[:length]
    half = max(1, k // 2)
    if divisor == "capacity":
        n_full, n_half = k, half
    elif divisor == "observed":
        n_full, n_half = length, max(1, min(length, half))
    else:
        raise ValueError(f"unknown divisor rule {divisor!r}")
    rate_full = r.sum() / n_full
    rate_half = r[:half].sum() / n_half
    weight = length if reliability else 1
    return abs(rate_full - rate_half) * weight / (rate_half + 1.0) + 1.0


def value_score(kl_factor: float, zpd_factor: float) -> float:
    if kl_factor < 1.0 or zpd_factor < 1.0:
        raise ContractError("both factors must be at least 1")
    return kl_factor * zpd_factor


def select(scores: Sequence[ValueScore], frequency: float) -> set[int]:
    """Top ``ceil(frequency * n)`` learners by score; ties go to the smaller id."""
    if not 0.0 <= frequency <= 1.0:
        raise ContractError(f"frequency must lie in [0, 1], got {frequency}")
    n_pick = math.ceil(frequency * len(scores) - 1e-12)
    ranked = sorted(scores, key=lambda s: (-s.score, s.learner_id))
    return {s.learner_id for s in ranked[:n_pick]}


def select_random(learner_ids: Iterable[int], frequency: float, seed: int) -> set[int]:
    if not 0.0 <= frequency <= 1.0:
        raise ContractError(f"frequency must lie in [0, 1], got {frequency}")
    ids = sorted(learner_ids)
    n_pick = math.ceil(frequency * len(ids) - 1e-12)
    rng = np.random.default_rng(seed)
    return {ids[i] for i in rng.permutation(len(ids))[:n_pick]}


@dataclass(frozen=True)
class ControllerConfig:
    use_kl: bool = True
    use_zpd: bool = True
    use_reliability: bool = True
    divisor: str = "capacity"
    random: bool = False
    seed: int = 0


VARIANTS = {
    "full": ControllerConfig(),
    "wo_kl": ControllerConfig(use_kl=False),
    "wo_zpd": ControllerConfig(use_zpd=False),
    "wo_rel": ControllerConfig(use_reliability=False),
    "random": ControllerConfig(random=True),
}


def controller_variant(config: ControllerConfig | str = "full") -> Callable:
    """Scoring function ``(model, windows) -> list[ValueScore]`` for a variant."""
    cfg = VARIANTS[config] if isinstance(config, str) else config

    def scorer(model: DKT, windows: Sequence[Window]) -> list[ValueScore]:
        return score_windows(model, windows, cfg)
    scorer.config = cfg
    return scorer


def score_windows(model: DKT, windows: Sequence[Window], config: ControllerConfig | None = None
                  ) -> list[ValueScore]:
    """Score each window from the backbone's states at floor(len/2) and len."""
    cfg = config or ControllerConfig()
    if not windows:
        return []
    states = knowledge_states(model, Batch.from_windows(windows)) if cfg.use_kl else None
    out = []
    for b, w in enumerate(windows):
        if w.length < 1:
            raise DegenerateInputError(f"learner {w.learner_id} has an empty window")
        kl = 1.0
        if cfg.use_kl:
            mid = max(1, w.length // 2)
            kl = fine_grained_change(states[b, mid - 1], states[b, w.length - 1])
        z = zpd(w.responses, w.capacity, w.length, cfg.use_reliability, cfg.divisor) if cfg.use_zpd else 1.0
        out.append(ValueScore(w.learner_id, kl, z))
    return out


def choose(model: DKT, windows: Sequence[Window], frequency: float,
           config: ControllerConfig | str = "full") -> tuple[set[int], list[ValueScore]]:
    cfg = VARIANTS[config] if isinstance(config, str) else config
    scores = score_windows(model, windows, cfg)
    if cfg.random:
        return select_random([w.learner_id for w in windows], frequency, cfg.seed), scores
    return select(scores, frequency), scores


def score_report(scores: Sequence[ValueScore], selected: set[int]) -> str:
    """Tab-separated table for inspection, highest score first."""
    rows = ["learner_id\tkl_factor\tzpd_factor\tscore\tselected"]
    for s in sorted(scores, key=lambda s: (-s.score, s.learner_id)):
        rows.append(f"{s.learner_id}\t{s.kl_factor:.6f}\t{s.zpd_factor:.6f}\t{s.score:.6f}\t"
                    f"{int(s.learner_id in selected)}")
    return "\n".join(rows) + "\n"
