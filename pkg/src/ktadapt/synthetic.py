"""Seeded item-response simulator with controllable regime shifts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Interaction, InteractionSequence


@dataclass(frozen=True)
class ShiftProfile:
    """How the latent ability moves.

    ``intra``: a learner's ability jumps by ``magnitude`` at step
    ``floor(shift_at * length)``; only a ``shifted_fraction`` of learners jump
    (chosen at random), and each jumping learner gains only on a random
    ``concept_fraction`` of the concepts.  With ``topics > 0`` the concepts are
    cut into that many contiguous topics and whole topics jump together.
    ``target="hardest"`` makes every jumping learner gain on the hardest
    topics (by mean difficulty) instead of a random draw, as after a lesson
    on the material that used to trip learners up.
    ``inter``: learners fall into ``groups`` groups whose
    ability is offset by ``magnitude * g / (groups - 1)``.  ``none``: stationary.
    """

    mode: str = "intra"
    magnitude: float = 2.0
    shift_at: float = 0.5
    shifted_fraction: float = 1.0
    concept_fraction: float = 1.0
    topics: int = 0
    groups: int = 4
    target: str = "random"

    def __post_init__(self):
        if self.mode not in ("intra", "inter", "none"):
            raise ValueError(f"unknown shift mode {self.mode!r}")
        if self.target not in ("random", "hardest"):
            raise ValueError(f"unknown shift target {self.target!r}")
        for name in ("shifted_fraction", "concept_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SynthDataset:
    sequences: list[InteractionSequence]
    num_concepts: int
    difficulty: np.ndarray
    ability: np.ndarray
    jump: np.ndarray
    shift_step: np.ndarray
    group: np.ndarray
    profile: ShiftProfile
    seed: int
    meta: dict = field(default_factory=dict)

    def by_id(self) -> dict[int, InteractionSequence]:
        return {s.learner_id: s for s in self.sequences}


def synth_benchmark(seed: int, n_learners: int, k: int, profile: ShiftProfile | None = None,
                    num_concepts: int = 20, questions_per_concept: int = 5,
                    mean_gap: float = 300.0, horizon: float = 30 * 86400.0) -> SynthDataset:
    """Learners answering with P(correct) = sigmoid(ability - difficulty[concept]).

    Every learner gets exactly ``k`` interactions.  Start times are spread
    uniformly over ``horizon`` seconds; gaps are exponential with mean
    ``mean_gap`` (at least one second).
    """
    profile = profile or ShiftProfile()
    rng = np.random.default_rng(seed)
    difficulty = rng.normal(0.0, 1.0, size=num_concepts)
    ability = rng.normal(0.0, 1.0, size=n_learners)
    starts = np.sort(rng.uniform(0.0, horizon, size=n_learners)).astype(np.int64)
    jump = np.zeros((n_learners, num_concepts))
    shift_step = np.full(n_learners, k, dtype=np.int64)
    group = np.zeros(n_learners, dtype=np.int64)
    if profile.mode == "intra":
        shifted = rng.random(n_learners) < profile.shifted_fraction
        units = np.arange(num_concepts)
        if profile.topics > 0:
            units = np.arange(num_concepts) * profile.topics // num_concepts
        n_units = units.max() + 1
        n_hit = int(round(profile.concept_fraction * n_units))
        unit_difficulty = np.array([difficulty[units == u].mean() for u in range(n_units)])
        hardest = np.argsort(-unit_difficulty, kind="stable")[:n_hit]
        for s in np.flatnonzero(shifted):
            hit = hardest if profile.target == "hardest" else rng.permutation(n_units)[:n_hit]
            jump[s, np.isin(units, hit)] = profile.magnitude
        shift_step[:] = int(np.floor(profile.shift_at * k))
    elif profile.mode == "inter":
        group = rng.integers(0, profile.groups, size=n_learners)
        ability = ability + profile.magnitude * group / max(1, profile.groups - 1)

    sequences = []
    for s in range(n_learners):
        concepts = rng.integers(0, num_concepts, size=k)
        theta = ability[s] + np.where(np.arange(k) >= shift_step[s], jump[s, concepts], 0.0)
        p = 1.0 / (1.0 + np.exp(-(theta - difficulty[concepts])))
        responses = (rng.random(k) < p).astype(int)
        gaps = np.maximum(1, rng.exponential(mean_gap, size=k).astype(np.int64))
        gaps[0] = 0
        stamps = starts[s] + np.cumsum(gaps)
        qs = concepts * questions_per_concept + rng.integers(0, questions_per_concept, size=k)
        xs = [Interaction(int(q), frozenset((int(c),)), int(r), int(t))
              for q, c, r, t in zip(qs, concepts, responses, stamps)]
        sequences.append(InteractionSequence(s, xs))
    return SynthDataset(sequences, num_concepts, difficulty, ability, jump, shift_step, group, profile, seed)


def flip_cohort(seed: int, n_learners: int = 20, n_flippers: int = 2, k: int = 20,
                num_concepts: int = 10) -> tuple[list[InteractionSequence], set[int]]:
    """Small cohort for checking learner scoring.

    Flippers answer everything wrong in the first half of the window and
    everything right in the second.  The rest keep a fixed success rate;
    every other stationary learner also moves to a different block of
    concepts halfway through, which shifts knowledge states without any
    change in correctness.
    """
    rng = np.random.default_rng(seed)
    flippers = set(int(i) for i in rng.choice(n_learners, size=n_flippers, replace=False))
    half = k // 2
    block = max(1, num_concepts // 2)
    sequences = []
    drift = 0
    for lid in range(n_learners):
        concepts = rng.integers(0, num_concepts, size=k)
        if lid in flippers:
            responses = (np.arange(k) >= half).astype(int)
        else:
            responses = (rng.random(k) < rng.uniform(0.3, 0.7)).astype(int)
            if drift % 2 == 0:
                concepts[:half] = rng.integers(0, block, size=half)
                concepts[half:] = rng.integers(block, num_concepts, size=k - half)
            drift += 1
        xs = [Interaction(int(c), frozenset((int(c),)), int(r), 60 * i)
              for i, (c, r) in enumerate(zip(concepts, responses))]
        sequences.append(InteractionSequence(lid, xs))
    return sequences, flippers
