"""Interaction logs: parsing, preprocessing, windowing and learner splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD = 0


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(ValueError):
    pass


class DatasetEmptyError(ValueError):
    pass


class SplitSizeError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    question: int
    concepts: frozenset[int]
    response: int
    timestamp: int

    def __post_init__(self):
        if self.response not in (0, 1):
            raise ValidationError(f"response must be 0 or 1, got {self.response}")
        if not self.concepts:
            raise ValidationError("an interaction needs at least one concept")


@dataclass
class InteractionSequence:
    learner_id: int
    interactions: list[Interaction]

    @property
    def actual_length(self) -> int:
        return len(self.interactions)

    @property
    def first_timestamp(self) -> int:
        return self.interactions[0].timestamp

    def concept_ids(self) -> list[int]:
        """Single concept per step; valid only after remapping."""
        out = []
        for x in self.interactions:
            if len(x.concepts) != 1:
                raise ValidationError("sequence still carries concept sets; remap first")
            out.append(next(iter(x.concepts)))
        return out


@dataclass
class Window:
    """Fixed-capacity slice of one learner's sequence.

    ``concepts`` holds remapped concept id + 1 so that 0 is free for padding.
    Every array is zero beyond ``length``.
    """

    concepts: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    length: int
    offset: int = 0
    learner_id: int = -1

    @property
    def capacity(self) -> int:
        return len(self.concepts)

    def prefix(self, n: int) -> "Window":
        """Same capacity, only the first ``n`` steps kept."""
        n = min(n, self.length)
        c, r, t = (np.zeros_like(a) for a in (self.concepts, self.responses, self.timestamps))
        c[:n], r[:n], t[:n] = self.concepts[:n], self.responses[:n], self.timestamps[:n]
        return Window(c, r, t, n, self.offset, self.learner_id)


@dataclass(frozen=True)
class ColumnMapping:
    learner: str = "learner"
    question: str = "question"
    concepts: str = "concepts"
    response: str = "response"
    timestamp: str = "timestamp"
    concept_sep: str = ";"


@dataclass
class DatasetSplits:
    train: list[int]
    valid: list[int]
    adapt: list[int]
    test: list[int]
    mode: str = "temporal"
    keys: dict[int, float] = field(default_factory=dict)

    def parts(self) -> dict[str, list[int]]:
        return {"train": self.train, "valid": self.valid, "adapt": self.adapt, "test": self.test}

    def all_ids(self) -> list[int]:
        return self.train + self.valid + self.adapt + self.test


def parse_interactions(path, mapping: ColumnMapping | None = None) -> list[InteractionSequence]:
    """Read a UTF-8 CSV log into per-learner sequences sorted by learner id.

    Within a learner, interactions are ordered by timestamp; equal timestamps
    keep file order.
    """
    mapping = mapping or ColumnMapping()
    cols = [mapping.learner, mapping.question, mapping.concepts, mapping.response, mapping.timestamp]
    by_learner: dict[int, list[tuple[int, int, Interaction]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in cols if c not in header]
        if missing:
            raise ParseError(f"header lacks columns {missing}", 1)
        pos = [header.index(c) for c in cols]
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            learner, question, concepts, response, ts = (row[i].strip() for i in pos)
            try:
                lid, q, r, t = int(learner), int(question), int(response), int(ts)
                cset = frozenset(int(c) for c in concepts.split(mapping.concept_sep) if c.strip())
            except ValueError as err:
                raise ParseError(str(err), line) from None
            try:
                x = Interaction(q, cset, r, t)
            except ValidationError as err:
                raise ValidationError(f"line {line}: {err}") from None
            by_learner.setdefault(lid, []).append((t, line, x))
    out = []
    for lid in sorted(by_learner):
        rows = sorted(by_learner[lid], key=lambda e: (e[0], e[1]))
        out.append(InteractionSequence(lid, [x for _, _, x in rows]))
    return out


def remap_concept_combinations(sequences: Sequence[InteractionSequence]
                               ) -> tuple[list[InteractionSequence], dict[frozenset[int], int]]:
    """Give every distinct concept set its own id, in order of first appearance."""
    table: dict[frozenset[int], int] = {}
    out = []
    for seq in sequences:
        xs = []
        for x in seq.interactions:
            new = table.setdefault(x.concepts, len(table))
            xs.append(Interaction(x.question, frozenset((new,)), x.response, x.timestamp))
        out.append(InteractionSequence(seq.learner_id, xs))
    return out, table


def write_remap_table(path, table: dict[frozenset[int], int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("new_id\tconcepts\n")
        for cset, new in sorted(table.items(), key=lambda kv: kv[1]):
            fh.write(f"{new}\t{';'.join(map(str, sorted(cset)))}\n")


def read_remap_table(path) -> dict[frozenset[int], int]:
    table = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            new, concepts = line.rstrip("\n").split("\t")
            table[frozenset(int(c) for c in concepts.split(";"))] = int(new)
    return table


def filter_short(sequences: Sequence[InteractionSequence], min_len: int = 5) -> list[InteractionSequence]:
    kept = [s for s in sequences if s.actual_length >= min_len]
    if not kept:
        raise DatasetEmptyError(f"no learner has at least {min_len} interactions")
    return kept


def num_concepts(sequences: Iterable[InteractionSequence]) -> int:
    return 1 + max(c for s in sequences for c in s.concept_ids())


def make_windows(sequence: InteractionSequence, k: int) -> list[Window]:
    """Cut a remapped sequence into consecutive, non-overlapping windows of capacity ``k``."""
    if k < 2:
        raise ValueError("window capacity k must be at least 2")
    concepts = np.asarray(sequence.concept_ids(), dtype=np.int64) + 1
    responses = np.asarray([x.response for x in sequence.interactions], dtype=np.int64)
    stamps = np.asarray([x.timestamp for x in sequence.interactions], dtype=np.int64)
    out = []
    for start in range(0, len(concepts), k):
        n = min(k, len(concepts) - start)
        c, r, t = (np.zeros(k, dtype=np.int64) for _ in range(3))
        c[:n] = concepts[start:start + n]
        r[:n] = responses[start:start + n]
        t[:n] = stamps[start:start + n]
        out.append(Window(c, r, t, n, start, sequence.learner_id))
    return out


def first_windows(sequences: Iterable[InteractionSequence], k: int) -> list[Window]:
    return [make_windows(s, k)[0] for s in sequences]


def all_windows(sequences: Iterable[InteractionSequence], k: int, min_len: int = 2) -> list[Window]:
    return [w for s in sequences for w in make_windows(s, k) if w.length >= min_len]


# -------------------------------------------------------------------- splits

def normalize_ratios(ratios: Sequence[float]) -> tuple[float, ...]:
    if len(ratios) != 4:
        raise ValueError("expected four ratios (train, valid, adapt, test)")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {tuple(ratios)}")
    total = float(sum(ratios))
    return tuple(r / total for r in ratios)


def block_sizes(n: int, ratios: Sequence[float] = (7, 1, 1, 1)) -> list[int]:
    """Floor the first three blocks; the remainder goes to the last."""
    fr = normalize_ratios(ratios)
    # guard against 0.7 * 10 landing just under 7
    head = [int(np.floor(n * f + 1e-9)) for f in fr[:3]]
    return head + [n - sum(head)]


def _blocks(ordered: list[int], ratios) -> list[list[int]]:
    sizes = block_sizes(len(ordered), ratios)
    out, lo = [], 0
    for s in sizes:
        out.append(ordered[lo:lo + s])
        lo += s
    return out


def split_temporal(sequences: Sequence[InteractionSequence], ratios=(7, 1, 1, 1)) -> DatasetSplits:
    """Assign whole learners to blocks in order of when they started responding."""
    if len(sequences) < 4:
        raise SplitSizeError(f"need at least 4 learners to split, got {len(sequences)}")
    order = sorted(sequences, key=lambda s: (s.first_timestamp, s.learner_id))
    ids = [s.learner_id for s in order]
    tr, va, ad, te = _blocks(ids, ratios)
    keys = {s.learner_id: float(s.first_timestamp) for s in sequences}
    return DatasetSplits(tr, va, ad, te, "temporal", keys)


def kl_divergence(p, q, eps: float = 1e-12) -> float:
    """KL(p || q) after clamping to ``eps`` and normalising both to sum 1."""
    p = np.maximum(np.asarray(p, dtype=np.float64), eps)
    q = np.maximum(np.asarray(q, dtype=np.float64), eps)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


DISTANCES: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "kl": kl_divergence,
    "l1": lambda p, q: float(np.abs(np.asarray(p) / np.sum(p) - np.asarray(q) / np.sum(q)).sum()),
}


def state_change(encoder, sequence: InteractionSequence, distance: str = "kl") -> float:
    """Distance between the encoder's states at the middle and the end of a sequence."""
    from .backbone import knowledge_states

    n = sequence.actual_length
    if n < 2:
        raise ValidationError(f"learner {sequence.learner_id} has fewer than 2 interactions")
    w = make_windows(sequence, max(n, 2))[0]
    states = knowledge_states(encoder, [w])[0]
    return DISTANCES[distance](states[n - 1], states[n // 2 - 1])


def split_group(sequences: Sequence[InteractionSequence], encoder, ratios=(7, 1, 1, 1),
                distance: str = "kl") -> DatasetSplits:
    """Order learners by how far their knowledge state moved, then cut 7:1:1:1."""
    if not getattr(encoder, "trained", False):
        from .numcore import ContractError
        raise ContractError("split_group needs a trained encoder")
    if len(sequences) < 4:
        raise SplitSizeError(f"need at least 4 learners to split, got {len(sequences)}")
    keys = {s.learner_id: state_change(encoder, s, distance) for s in sequences}
    ids = sorted(keys, key=lambda lid: (keys[lid], lid))
    tr, va, ad, te = _blocks(ids, ratios)
    return DatasetSplits(tr, va, ad, te, "group", keys)


def write_manifest(path, splits: DatasetSplits, header: dict[str, str] | None = None) -> None:
    lines = [f"# mode = {splits.mode}"]
    for key, val in (header or {}).items():
        lines.append(f"# {key} = {val}")
    for name, ids in splits.parts().items():
        lines.append(f"[{name}]")
        lines.extend(str(i) for i in ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetSplits:
    parts: dict[str, list[int]] = {}
    mode, current = "temporal", None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# mode = "):
            mode = line.split("=", 1)[1].strip()
        elif line.startswith("#") or not line.strip():
            continue
        elif line.startswith("["):
            current = line.strip("[]")
            parts[current] = []
        else:
            parts[current].append(int(line))
    return DatasetSplits(parts["train"], parts["valid"], parts["adapt"], parts["test"], mode)


def write_interactions(path, sequences: Sequence[InteractionSequence]) -> None:
    """Inverse of :func:`parse_interactions` with the default column mapping."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["learner", "question", "concepts", "response", "timestamp"])
        for s in sequences:
            for x in s.interactions:
                w.writerow([s.learner_id, x.question, ";".join(map(str, sorted(x.concepts))),
                            x.response, x.timestamp])
