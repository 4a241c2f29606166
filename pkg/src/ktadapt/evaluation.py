"""Evaluation harness: reports, timing, shift diagnostics and the synthetic benchmark."""
from __future__ import annotations

import logging
import os
import statistics
import time
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import backbone as bb
from . import controller as ctl
from . import generator as gen
from . import tuning
from .data import (DatasetSplits, InteractionSequence, SplitSizeError, Window, first_windows,
                   kl_divergence, split_group, split_temporal)
from .metrics import auc, rmse
from .synthetic import ShiftProfile, SynthDataset, synth_benchmark

log = logging.getLogger(__name__)

METHODS = ("frozen", "cuffkt", "fft", "bitfit", "adapter", "cuffkt+fft")


@dataclass
class EvalReport:
    method: str
    auc: float
    rmse: float
    time_overhead_ms: float
    split_mode: str
    seed: int
    frequency: float = 1.0
    variant: str = "full"
    threads: int = 1
    n_scored: int = 0
    selected: int = 0

    @classmethod
    def header(cls) -> str:
        return "\t".join(f.name for f in fields(cls))

    def row(self) -> str:
        vals = []
        for f in fields(self):
            v = getattr(self, f.name)
            vals.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        return "\t".join(vals)


@dataclass
class ShiftReport:
    part_index: int
    kl_vs_part1: float
    auc_on_part: float
    threshold: float

    @property
    def shifted(self) -> bool:
        return self.kl_vs_part1 > self.threshold

    @classmethod
    def header(cls) -> str:
        return "part_index\tkl_vs_part1\tauc_on_part\tthreshold\tshifted"

    def row(self) -> str:
        return (f"{self.part_index}\t{self.kl_vs_part1:.6f}\t{self.auc_on_part:.6f}\t"
                f"{self.threshold:.6f}\t{int(self.shifted)}")


def write_table(path, rows: Sequence) -> None:
    """Tab-separated, header first; appends when the file already has a header."""
    if not rows:
        return
    header = type(rows[0]).header()
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a", encoding="utf-8") as fh:
        if not exists:
            fh.write(header + "\n")
        for r in rows:
            fh.write(r.row() + "\n")


def read_table(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        return [dict(zip(header, line.rstrip("\n").split("\t"))) for line in fh if line.strip()]


# ------------------------------------------------------------------- timing

def thread_count() -> int:
    env = os.environ.get("KTADAPT_THREADS") or os.environ.get("OMP_NUM_THREADS")
    if env:
        return int(env)
    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return max(counts) if counts else 1


def time_overhead(method_run: Callable[[], object], baseline_run: Callable[[], object],
                  repeats: int = 3, threads: int | None = None) -> float:
    """Median extra wall-clock (ms) of ``method_run`` over ``baseline_run``, floored at 0."""
    if repeats < 3:
        raise ValueError("time_overhead needs at least 3 repeats")
    threads = threads or thread_count()
    diffs = []
    with threadpool_limits(limits=threads):
        for _ in range(repeats):
            t0 = time.perf_counter()
            method_run()
            t1 = time.perf_counter()
            baseline_run()
            t2 = time.perf_counter()
            diffs.append((t1 - t0) - (t2 - t1))
    return max(0.0, statistics.median(diffs) * 1000.0)


def wall_ms(fn: Callable[[], object], repeats: int = 5) -> float:
    """Median wall-clock of ``fn`` in milliseconds."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1000.0


# -------------------------------------------------------- shift diagnostics

def correct_rates(segments: Sequence[tuple[np.ndarray, np.ndarray]], num_concepts: int,
                  prior: float = 1.0) -> np.ndarray:
    """Per-concept correct rate over (concepts, responses) segments.

    ``concepts`` are 0-based.  A symmetric pseudo-count ``prior`` keeps
    unseen concepts at 0.5 instead of undefined.
    """
    right = np.full(num_concepts, prior / 2.0)
    seen = np.full(num_concepts, prior)
    for c, r in segments:
        np.add.at(right, c, r)
        np.add.at(seen, c, 1.0)
    return right / seen


def _stage_bounds(n: int, parts: int, p: int) -> tuple[int, int]:
    size = n // parts
    return p * size, (p + 1) * size if p < parts - 1 else n


def shift_diagnostic(sequences: Sequence[InteractionSequence], num_concepts: int, parts: int = 4,
                     mode: str = "stage", threshold: float = 0.01, encoder: bb.DKT | None = None,
                     train_config: bb.TrainConfig | None = None, holdout: float = 0.2,
                     seed: int = 0, d: int = 32, d_in: int = 64) -> list[ShiftReport]:
    """KL of each part's per-concept correct rates against part 1, and the AUC there
    of a backbone trained on part 1 only.

    ``mode="stage"`` cuts every learner's sequence into ``parts`` consecutive
    stages; predictions for stage p run over the learner's full history and
    only stage-p steps are scored.  ``mode="group"`` orders learners by their
    knowledge-state change under ``encoder`` and cuts them into ``parts``
    blocks.  In both modes part 1's AUC is measured on held-out learners.
    """
    if parts < 2:
        raise ValueError("need at least 2 parts")
    train_config = train_config or bb.TrainConfig(max_epochs=30, patience=5, batch_size=32,
                                                  lr=0.005, seed=seed)
    rng = np.random.default_rng(seed)
    ids = [s.learner_id for s in sequences]
    by_id = {s.learner_id: s for s in sequences}
    k = max(s.actual_length for s in sequences)

    if mode == "stage":
        if len(sequences) < 2 or min(s.actual_length for s in sequences) < 2 * parts:
            raise SplitSizeError("sequences too short to cut into stages")
        windows = {lid: first_windows([by_id[lid]], k)[0] for lid in ids}
        order = rng.permutation(len(ids))
        n_hold = max(1, int(round(holdout * len(ids))))
        held = [ids[i] for i in order[:n_hold]]
        fit_ids = [ids[i] for i in order[n_hold:]]
        n_val = max(1, len(fit_ids) // 8)
        segs = []
        for p in range(parts):
            seg = []
            for lid in ids:
                w = windows[lid]
                lo, hi = _stage_bounds(w.length, parts, p)
                seg.append((w.concepts[lo:hi] - 1, w.responses[lo:hi]))
            segs.append(seg)

        def stage1(lid):
            w = windows[lid]
            return w.prefix(_stage_bounds(w.length, parts, 0)[1])
        model = bb.DKT(num_concepts, d, d_in, seed=seed)
        bb.train(model, [stage1(i) for i in fit_ids[n_val:]], [stage1(i) for i in fit_ids[:n_val]],
                 train_config)
        hb = bb.Batch.from_windows([windows[i] for i in held])
        h = model.hidden(hb).data
        aucs = []
        for p in range(parts):
            lo = np.array([max(1, _stage_bounds(n, parts, p)[0]) for n in hb.lengths])
            hi = np.array([_stage_bounds(n, parts, p)[1] for n in hb.lengths])
            probs, labels = bb.predict(model, bb.Batch(hb.concepts, hb.responses, hb.timestamps, hi), None, lo, h)
            aucs.append(auc(probs, labels))
    elif mode == "group":
        if len(sequences) < 2 * parts:
            raise SplitSizeError(f"need at least {2 * parts} learners for {parts} groups")
        if encoder is None:
            raise ValueError("group mode needs a trained encoder to order learners")
        from .data import state_change
        key = {lid: state_change(encoder, by_id[lid]) for lid in ids}
        ordered = sorted(ids, key=lambda lid: (key[lid], lid))
        blocks = np.array_split(np.array(ordered), parts)
        segs = [[(first_windows([by_id[l]], k)[0].concepts[:by_id[l].actual_length] - 1,
                  first_windows([by_id[l]], k)[0].responses[:by_id[l].actual_length]) for l in b]
                for b in blocks]
        first = list(blocks[0])
        rng.shuffle(first)
        n_hold = max(1, int(round(holdout * len(first))))
        held, fit_ids = first[:n_hold], first[n_hold:]
        n_val = max(1, len(fit_ids) // 8)
        if len(fit_ids) <= n_val:
            raise SplitSizeError("too few learners in the first group to train on")
        model = bb.DKT(num_concepts, d, d_in, seed=seed)
        bb.train(model, first_windows([by_id[i] for i in fit_ids[n_val:]], k),
                 first_windows([by_id[i] for i in fit_ids[:n_val]], k), train_config)
        aucs = []
        for p, b in enumerate(blocks):
            eval_ids = held if p == 0 else list(b)
            probs, labels = bb.predict(model, bb.Batch.from_windows(first_windows([by_id[i] for i in eval_ids], k)))
            aucs.append(auc(probs, labels))
    else:
        raise ValueError(f"unknown diagnostic mode {mode!r}")

    base = correct_rates(segs[0], num_concepts)
    return [ShiftReport(p + 1, kl_divergence(correct_rates(segs[p], num_concepts), base), aucs[p], threshold)
            for p in range(parts)]


# ------------------------------------------------------------ benchmark runs

@dataclass
class BenchmarkConfig:
    """Everything that defines one synthetic or file-backed experiment run."""

    seed: int = 0
    n_learners: int = 500
    k: int = 100
    num_concepts: int = 20
    profile: ShiftProfile = field(default_factory=lambda: ShiftProfile(
        "intra", magnitude=2.0, shift_at=0.25, shifted_fraction=1.0, concept_fraction=0.5, topics=4, target="hardest"))
    split_mode: str = "temporal"
    ratios: tuple[float, ...] = (7, 1, 1, 1)
    d: int = 32
    d_in: int = 64
    heads: int = 4
    rank: int = 1
    batch_size: int = 32
    lr: float = 0.005
    max_epochs: int = 40
    patience: int = 5
    gen_lr: float = 0.005
    tune_epochs: int = 10
    tune_patience: int = 3
    tune_lr: float = 0.005
    bottleneck: int = 8
    frequency: float = 1.0
    controller: str = "full"
    variant: str = "full"
    pretrain: str = "auto"      # "stage": pre-shift prefix only, "full": whole windows
    timing_repeats: int = 3
    named_streams: bool = False  # derive data/init/shuffle seeds from ``seed`` by name

    def stream(self, name: str) -> int:
        """Seed for one randomness consumer; plain ``seed`` unless named streams are on."""
        if not self.named_streams:
            return self.seed
        tag = zlib.crc32(name.encode())
        return int(np.random.SeedSequence([self.seed, tag]).generate_state(1)[0])

    def train_config(self) -> bb.TrainConfig:
        return bb.TrainConfig(self.max_epochs, self.patience, self.batch_size, self.lr, self.stream("shuffle"))

    def gen_train_config(self) -> gen.GenTrainConfig:
        return gen.GenTrainConfig(self.max_epochs, self.patience, self.batch_size, self.gen_lr,
                                  self.stream("shuffle"))

    def tuning_config(self, method: str) -> tuning.TuningConfig:
        return tuning.TuningConfig(method, self.tune_epochs, self.tune_lr, self.tune_patience,
                                   self.batch_size, self.bottleneck, self.stream("shuffle"))

    def generator_config(self) -> gen.GeneratorConfig:
        base = gen.GeneratorConfig(self.num_concepts, self.d, self.d_in, self.heads, self.rank,
                                   seed=self.stream("init"))
        return gen.generator_variant(base, self.variant)


@dataclass
class Prepared:
    config: BenchmarkConfig
    sequences: list[InteractionSequence]
    splits: DatasetSplits
    windows: dict[str, list[Window]]
    shift_step: dict[int, int] = field(default_factory=dict)
    dataset: SynthDataset | None = None

    @property
    def stage_split(self) -> bool:
        cfg = self.config
        if cfg.pretrain == "auto":
            return bool(self.shift_step) and cfg.profile.mode == "intra"
        return cfg.pretrain == "stage"


def prepare(config: BenchmarkConfig, sequences: Sequence[InteractionSequence] | None = None,
            encoder: bb.DKT | None = None) -> Prepared:
    """Generate (or take) data, split learners, and cut one window per learner."""
    dataset = None
    shift = {}
    if sequences is None:
        dataset = synth_benchmark(config.stream("data"), config.n_learners, config.k, config.profile,
                                  config.num_concepts)
        sequences = dataset.sequences
        if config.profile.mode == "intra":
            shift = {s.learner_id: int(dataset.shift_step[i]) for i, s in enumerate(sequences)}
    if config.split_mode == "temporal":
        splits = split_temporal(sequences, config.ratios)
    elif config.split_mode == "group":
        if encoder is None:
            encoder = _group_encoder(config, sequences)
        splits = split_group(sequences, encoder, config.ratios)
    else:
        raise ValueError(f"unknown split mode {config.split_mode!r}")
    by_id = {s.learner_id: s for s in sequences}
    windows = {name: first_windows([by_id[i] for i in ids], config.k) for name, ids in splits.parts().items()}
    return Prepared(config, list(sequences), splits, windows, shift, dataset)


def _group_encoder(config: BenchmarkConfig, sequences) -> bb.DKT:
    """Small encoder fit on every learner, used only to order learners for the group split."""
    ws = first_windows(sequences, config.k)
    n_val = max(1, len(ws) // 10)
    enc = bb.DKT(config.num_concepts, config.d, config.d_in, seed=config.stream("init"))
    cfg = replace(config.train_config(), max_epochs=min(config.max_epochs, 10))
    bb.train(enc, ws[n_val:], ws[:n_val], cfg)
    return enc


def _stage_windows(prep: Prepared, ws: Sequence[Window]) -> list[Window]:
    if not prep.stage_split:
        return list(ws)
    return [w.prefix(max(2, prep.shift_step[w.learner_id])) for w in ws]


def pretrain_backbone(prep: Prepared) -> tuple[bb.DKT, bb.TrainingLog]:
    """Backbone fit on the train split; for intra shifts, only the pre-shift stage."""
    cfg = prep.config
    model = bb.DKT(cfg.num_concepts, cfg.d, cfg.d_in, seed=cfg.stream("init"))
    return bb.train(model, _stage_windows(prep, prep.windows["train"]),
                    _stage_windows(prep, prep.windows["valid"]), cfg.train_config())


def fit_generator(prep: Prepared, backbone: bb.DKT, variant: str | None = None
                  ) -> tuple[gen.Generator, bb.TrainingLog]:
    cfg = prep.config if variant is None else replace(prep.config, variant=variant)
    g = gen.Generator(cfg.generator_config(), backbone)
    return gen.train_generator(g, backbone, prep.windows["train"], prep.windows["valid"],
                               cfg.gen_train_config())


def stage_auc(backbone: bb.DKT, prep: Prepared, split: str = "test") -> tuple[float, float]:
    """Frozen AUC on pre-shift and on post-shift steps of a split."""
    ws = prep.windows[split]
    b = bb.Batch.from_windows(ws)
    h = backbone.hidden(b).data
    shift = np.array([prep.shift_step.get(w.learner_id, w.length) for w in ws])
    pre = bb.predict(backbone, bb.Batch(b.concepts, b.responses, b.timestamps, np.minimum(shift, b.lengths)),
                     None, 1, h)
    post = bb.predict(backbone, b, None, np.maximum(shift, 1), h)
    return auc(*pre), auc(*post)


def _scored(prep: Prepared, split: str = "test") -> tuple[bb.Batch, bb.Batch, np.ndarray]:
    b = bb.Batch.from_windows(prep.windows[split])
    half = gen.context_lengths(b.lengths)
    return b, b.prefix(half), half


def _mixed_layer(backbone: bb.DKT, layer: bb.DynamicLayerParams, chosen: np.ndarray
                 ) -> bb.DynamicLayerParams:
    """Generated layer for chosen rows, the backbone's own layer elsewhere."""
    w = np.where(chosen[:, None, None], layer.weight.data, backbone.params["out.weight"].data[None])
    b = np.where(chosen[:, None], layer.bias.data, backbone.params["out.bias"].data[None])
    return bb.DynamicLayerParams(bb.Value(w), bb.Value(b))


def evaluate_method(method: str, prep: Prepared, backbone: bb.DKT, generator: gen.Generator | None = None,
                    frequency: float | None = None, controller: str | None = None,
                    time_it: bool = True) -> tuple[EvalReport, dict]:
    """Score one adaptation method on each test learner's second half.

    The first half of the window is the adaptation context; no method sees
    the scored responses before predicting them.
    """
    cfg = prep.config
    frequency = cfg.frequency if frequency is None else frequency
    controller = controller or cfg.controller
    batch, ctx, half = _scored(prep)
    ctx_windows = [w.prefix(int(n)) for w, n in zip(prep.windows["test"], half)]
    extra: dict = {}
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in ("cuffkt", "cuffkt+fft") and generator is None:
        raise ValueError(f"method {method} needs a trained generator")

    def frozen_run():
        return bb.predict(backbone, batch, None, half)

    def cuff_run(model=backbone, gmodel=generator):
        chosen_ids, scores = ctl.choose(model, ctx_windows, frequency, controller)
        chosen = np.array([w.learner_id in chosen_ids for w in ctx_windows])
        if chosen.any():
            layer = _mixed_layer(model, gen.adapt(gmodel, model, ctx), chosen)
        else:
            layer = None
        return bb.predict(model, batch, layer, half), chosen_ids, scores

    if method == "frozen":
        probs, labels = frozen_run()
        overhead = 0.0
    elif method == "cuffkt":
        (probs, labels), chosen_ids, scores = cuff_run()
        extra["scores"], extra["selected"] = scores, chosen_ids
        overhead = time_overhead(cuff_run, frozen_run, cfg.timing_repeats) if time_it else 0.0
    elif method in ("fft", "bitfit", "adapter"):
        tcfg = cfg.tuning_config(method)
        tuned = tuning.tune(backbone, prep.windows["adapt"], tcfg)
        probs, labels = bb.predict(tuned, batch, None, half)
        extra["model"] = tuned
        overhead = time_overhead(lambda: bb.predict(tuning.tune(backbone, prep.windows["adapt"], tcfg),
                                                    batch, None, half),
                                 frozen_run, cfg.timing_repeats) if time_it else 0.0
    else:
        def combo():
            tuned = tuning.fft(backbone, prep.windows["adapt"], cfg.tuning_config("fft"))
            return cuff_run(tuned, tuning.rebase_generator(generator, backbone, tuned))
        (probs, labels), chosen_ids, scores = combo()
        extra["scores"], extra["selected"] = scores, chosen_ids
        overhead = time_overhead(combo, frozen_run, cfg.timing_repeats) if time_it else 0.0

    report = EvalReport(method, auc(probs, labels), rmse(probs, labels), overhead, prep.splits.mode,
                        cfg.seed, frequency, cfg.variant if method.startswith("cuffkt") else "-",
                        thread_count(), int(len(labels)), len(extra.get("selected", ())))
    return report, extra


@dataclass
class RLPAResult:
    seed: int
    pre_shift_auc: float
    post_shift_auc: float
    frozen_auc: float
    adapted_auc: float
    seconds: float

    @property
    def degradation(self) -> float:
        return self.pre_shift_auc - self.post_shift_auc

    @property
    def gain(self) -> float:
        return self.adapted_auc - self.frozen_auc


def run_rlpa(config: BenchmarkConfig) -> RLPAResult:
    """Pretrain, fit the generator, and compare frozen vs adapted on the test split."""
    t0 = time.perf_counter()
    prep = prepare(config)
    model, _ = pretrain_backbone(prep)
    pre, post = stage_auc(model, prep)
    g, _ = fit_generator(prep, model)
    frozen, _ = evaluate_method("frozen", prep, model, time_it=False)
    adapted, _ = evaluate_method("cuffkt", prep, model, g, frequency=1.0, time_it=False)
    return RLPAResult(config.seed, pre, post, frozen.auc, adapted.auc, time.perf_counter() - t0)
