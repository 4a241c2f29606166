"""Command-line front end: ``ktadapt <command> [--config FILE] [--set key=value ...]``.

Commands share one run directory (``out``).  ``prepare`` writes the dataset,
remap table and split manifest there; later commands read them back, so each
step can be rerun on its own.  Every file written carries the config hash.

Exit codes: 0 ok, 1 usage/config, 2 data or missing files, 3 numeric or
training failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import backbone as bb
from . import checkpoint
from . import controller as ctl
from . import evaluation as ev
from . import generator as gen
from . import tuning
from .data import (ColumnMapping, DatasetEmptyError, ParseError, SplitSizeError, ValidationError, filter_short,
                   first_windows, num_concepts, parse_interactions, read_manifest, remap_concept_combinations, write_interactions,
                   write_manifest, write_remap_table)
from .metrics import UndefinedMetricError
from .synthetic import ShiftProfile

log = logging.getLogger("ktadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    # data
    data: str = ""                  # empty: synthetic benchmark
    col_learner: str = "learner"
    col_question: str = "question"
    col_concepts: str = "concepts"
    col_response: str = "response"
    col_timestamp: str = "timestamp"
    concept_sep: str = ";"
    min_len: int = 5
    split: str = "temporal"
    ratios: str = "7:1:1:1"
    k: int = 100
    # synthetic benchmark
    n_learners: int = 500
    num_concepts: int = 20
    shift: str = "intra"
    magnitude: float = 2.0
    shift_at: float = 0.25
    shifted_fraction: float = 1.0
    concept_fraction: float = 0.5
    topics: int = 4
    target: str = "hardest"
    groups: int = 4
    # models
    d: int = 32
    d_in: int = 64
    heads: int = 4
    rank: int = 1
    variant: str = "full"
    # controller
    controller: str = "full"
    frequency: float = 1.0
    # training and tuning
    batch_size: int = 32
    lr: float = 0.005
    gen_lr: float = 0.005
    max_epochs: int = 40
    patience: int = 5
    pretrain: str = "auto"
    tune_epochs: int = 10
    tune_lr: float = 0.005
    tune_patience: int = 3
    bottleneck: int = 8
    timing_repeats: int = 3
    # run
    seed: int = 0
    out: str = "runs/default"

    def ratio_tuple(self) -> tuple[float, ...]:
        try:
            parts = tuple(float(x) for x in self.ratios.split(":"))
        except ValueError:
            raise UsageError(f"ratios must look like 7:1:1:1, got {self.ratios!r}") from None
        if len(parts) != 4 or any(r <= 0 for r in parts):
            raise UsageError(f"ratios need four positive numbers, got {self.ratios!r}")
        return parts

    def mapping(self) -> ColumnMapping:
        return ColumnMapping(self.col_learner, self.col_question, self.col_concepts, self.col_response,
                             self.col_timestamp, self.concept_sep)

    def profile(self) -> ShiftProfile:
        return ShiftProfile(self.shift, self.magnitude, self.shift_at, self.shifted_fraction,
                            self.concept_fraction, self.topics, self.groups, self.target)

    def benchmark(self, n_concepts: int | None = None) -> ev.BenchmarkConfig:
        return ev.BenchmarkConfig(
            seed=self.seed, n_learners=self.n_learners, k=self.k,
            num_concepts=n_concepts or self.num_concepts, profile=self.profile(), split_mode=self.split,
            ratios=self.ratio_tuple(), d=self.d, d_in=self.d_in, heads=self.heads, rank=self.rank,
            batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs, patience=self.patience,
            gen_lr=self.gen_lr, tune_epochs=self.tune_epochs, tune_patience=self.tune_patience,
            tune_lr=self.tune_lr, bottleneck=self.bottleneck, frequency=self.frequency,
            controller=self.controller, variant=self.variant, pretrain=self.pretrain,
            timing_repeats=self.timing_repeats, named_streams=True)

    def canonical(self) -> str:
        """``key = value`` lines in field order, output directory left out."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self) if f.name != "out")

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise UsageError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        return int(raw) if kind == "int" else float(raw) if kind == "float" else raw
    except ValueError:
        raise UsageError(f"{name}: expected {kind}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), val.strip())
    return RunConfig(**values)


# -------------------------------------------------------------- run directory

class Run:
    """Paths and provenance for one run directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = Path(config.out)
        self.hash = config.digest()
        self.threads = ev.thread_count()

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing {p}; run the earlier command first")
        return p

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.config.seed, "threads": self.threads}

    def write_rows(self, name: str, rows: list[dict]) -> Path:
        """TSV with provenance columns; overwritten on every call."""
        path = self.path(name)
        if not rows:
            return path
        rows = [{**r, **self.stamp()} for r in rows]
        cols = list(rows[0])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(cols) + "\n")
            for r in rows:
                fh.write("\t".join(_fmt(r[c]) for c in cols) + "\n")
        return path

    def record(self, command: str, seconds: float) -> None:
        path = self.path("runs.tsv")
        new = not path.exists()
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write("command\tconfig_hash\tseed\tthreads\tseconds\n")
            fh.write(f"{command}\t{self.hash}\t{self.config.seed}\t{self.threads}\t{seconds:.3f}\n")


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _read_header(path: Path) -> dict[str, str]:
    head = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.startswith("# "):
            break
        key, val = line[2:].split(" = ", 1)
        head[key] = val
    return head


def load_prepared(run: Run) -> ev.Prepared:
    cfg = run.config
    manifest = run.need("manifest.tsv")
    head = _read_header(manifest)
    if head.get("config_hash") not in (None, run.hash):
        log.warning("manifest was written under config %s, current config is %s",
                    head["config_hash"], run.hash)
    splits = read_manifest(manifest)
    sequences = parse_interactions(run.need("interactions.csv"))
    bench = cfg.benchmark(int(head.get("num_concepts", cfg.num_concepts)))
    shift = {}
    if run.path("shift.tsv").exists():
        rows = ev.read_table(run.path("shift.tsv"))
        shift = {int(r["learner_id"]): int(r["shift_step"]) for r in rows}
    by_id = {s.learner_id: s for s in sequences}
    windows = {name: first_windows([by_id[i] for i in ids], bench.k) for name, ids in splits.parts().items()}
    return ev.Prepared(bench, sequences, splits, windows, shift)


def load_backbone(run: Run) -> bb.DKT:
    return bb.load(run.need("backbone.ckpt"))


def generator_file(variant: str, rank: int | None = None) -> str:
    return f"generator-{variant}" + (f"-r{rank}" if rank is not None else "") + ".ckpt"


def _log_rows(tlog: bb.TrainingLog) -> list[dict]:
    mark = tlog.watermark()
    return [{"epoch": e, "train_loss": tlog.train_loss[e], "valid_auc": tlog.valid_auc[e], "best_auc": mark[e]}
            for e in range(len(tlog.valid_auc))]


# ------------------------------------------------------------------- commands

def cmd_prepare(run: Run, args) -> None:
    cfg = run.config
    run.dir.mkdir(parents=True, exist_ok=True)
    shift_rows = []
    if cfg.data:
        raw = parse_interactions(cfg.data, cfg.mapping())
        seqs, table = remap_concept_combinations(raw)
        seqs = filter_short(seqs, cfg.min_len)
        bench = cfg.benchmark(num_concepts(seqs))
        prep = ev.prepare(bench, seqs)
    else:
        table = {frozenset((c,)): c for c in range(cfg.num_concepts)}
        prep = ev.prepare(cfg.benchmark())
        shift_rows = [{"learner_id": lid, "shift_step": step} for lid, step in sorted(prep.shift_step.items())]
    write_interactions(run.path("interactions.csv"), prep.sequences)
    write_remap_table(run.path("remap.tsv"), table)
    if shift_rows:
        run.write_rows("shift.tsv", shift_rows)
    header = {**run.stamp(), "num_concepts": prep.config.num_concepts, "learners": len(prep.sequences)}
    write_manifest(run.path("manifest.tsv"), prep.splits, header)
    sizes = {k: len(v) for k, v in prep.splits.parts().items()}
    print(f"prepared {len(prep.sequences)} learners, {prep.config.num_concepts} concepts, "
          f"{prep.splits.mode} split {sizes} -> {run.dir}")


def cmd_train(run: Run, args) -> None:
    prep = load_prepared(run)
    model, tlog = ev.pretrain_backbone(prep)
    bb.save(model, run.path("backbone.ckpt"), run.stamp())
    run.write_rows("train_log.tsv", _log_rows(tlog))
    print(f"backbone: best valid AUC {tlog.best_auc:.4f} at epoch {tlog.best_epoch}")


def _train_generator(run: Run, prep: ev.Prepared, model: bb.DKT, variant: str, rank: int | None = None):
    p = prep if rank is None else replace(prep, config=replace(prep.config, rank=rank))
    g, tlog = ev.fit_generator(p, model, variant)
    gen.save(g, run.path(generator_file(variant, rank)), run.stamp())
    return g, tlog


def cmd_train_gen(run: Run, args) -> None:
    prep = load_prepared(run)
    variant = args.variant or run.config.variant
    g, tlog = _train_generator(run, prep, load_backbone(run), variant)
    run.write_rows(f"gen_log-{variant}.tsv", _log_rows(tlog))
    print(f"generator ({variant}): best valid AUC {tlog.best_auc:.4f} at epoch {tlog.best_epoch}, "
          f"{g.param_count()} parameters")


def cmd_eval(run: Run, args) -> None:
    prep = load_prepared(run)
    variant = args.variant or run.config.variant
    frequency = run.config.frequency if args.frequency is None else args.frequency
    controller = args.controller or run.config.controller
    prep = replace(prep, config=replace(prep.config, variant=variant))
    methods = ev.METHODS if args.method == "all" else (args.method,)
    model = load_backbone(run)
    g = None
    if any(m.startswith("cuffkt") for m in methods):
        g = gen.load(run.need(generator_file(variant)))
    rows = []
    for method in methods:
        rep, extra = ev.evaluate_method(method, prep, model, g, frequency, controller, time_it=not args.no_timing)
        rows.append(asdict(rep))
        if "scores" in extra:
            run.path(f"scores-{method}.tsv").write_text(
                f"# config_hash = {run.hash}\n" + ctl.score_report(extra["scores"], extra["selected"]) + "\n",
                encoding="utf-8")
        print(f"{method:<11} AUC {rep.auc:.4f}  RMSE {rep.rmse:.4f}  TO {rep.time_overhead_ms:.1f} ms"
              + (f"  selected {rep.selected}" if method.startswith("cuffkt") else ""))
    run.write_rows("eval.tsv", rows)


def _ranks(text: str) -> list[int]:
    try:
        ranks = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"--ranks expects comma separated integers, got {text!r}") from None
    if not ranks or ranks[0] < 0:
        raise UsageError("--ranks needs at least one non-negative rank")
    return ranks


def cmd_sweep_rank(run: Run, args) -> None:
    prep = load_prepared(run)
    model = load_backbone(run)
    rows = []
    for rank in _ranks(args.ranks):
        g, _ = _train_generator(run, prep, model, run.config.variant, rank)
        rep, _ = ev.evaluate_method("cuffkt", replace(prep, config=replace(prep.config, rank=rank)), model, g,
                                    time_it=False)
        rows.append({"rank": rank, "param_count": g.param_count(), "auc": rep.auc, "rmse": rep.rmse})
        print(f"rank {rank}: {g.param_count()} parameters, AUC {rep.auc:.4f}")
    run.write_rows("sweep_rank.tsv", rows)


def cmd_shift_report(run: Run, args) -> None:
    prep = load_prepared(run)
    cfg = prep.config
    encoder = load_backbone(run) if args.mode == "group" else None
    reps = ev.shift_diagnostic(prep.sequences, cfg.num_concepts, args.parts, args.mode, args.threshold,
                               encoder, cfg.train_config(), seed=cfg.stream("init"), d=cfg.d, d_in=cfg.d_in)
    run.write_rows(f"shift_report-{args.mode}.tsv",
                   [{**asdict(r), "shifted": int(r.shifted)} for r in reps])
    for r in reps:
        print(f"part {r.part_index}: KL {r.kl_vs_part1:.4f}  AUC {r.auc_on_part:.4f}"
              + ("  shifted" if r.shifted else ""))


def cmd_ablate(run: Run, args) -> None:
    prep = load_prepared(run)
    model = load_backbone(run)
    rows = []
    if args.what in ("generator", "both"):
        for variant in ("full", "wo_dual", "wo_sfe", "wo_saa", "w_sha"):
            path = run.path(generator_file(variant))
            g = gen.load(path) if path.exists() and not args.retrain else _train_generator(run, prep, model, variant)[0]
            rep, _ = ev.evaluate_method("cuffkt", prep, model, g, time_it=False)
            rows.append({"kind": "generator", "variant": variant, "auc": rep.auc, "rmse": rep.rmse})
    if args.what in ("controller", "both"):
        g = gen.load(run.need(generator_file(run.config.variant)))
        freq = args.frequency
        for name in ctl.VARIANTS:
            rep, _ = ev.evaluate_method("cuffkt", prep, model, g, freq, name, time_it=False)
            rows.append({"kind": "controller", "variant": name, "auc": rep.auc, "rmse": rep.rmse})
    for r in rows:
        print(f"{r['kind']:<10} {r['variant']:<7} AUC {r['auc']:.4f}  RMSE {r['rmse']:.4f}")
    run.write_rows(f"ablate-{args.what}.tsv", rows)


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "train-gen": cmd_train_gen,
    "eval": cmd_eval,
    "sweep-rank": cmd_sweep_rank,
    "shift-report": cmd_shift_report,
    "ablate": cmd_ablate,
}


# --------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--data", help="interaction CSV; omit for the synthetic benchmark")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ktadapt", description="Knowledge-tracing adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="parse/generate data and write the split manifest")
    sub.add_parser("train", parents=[common], help="pretrain the backbone")
    p = sub.add_parser("train-gen", parents=[common], help="train the parameter generator")
    p.add_argument("--variant", choices=["full", "wo_dual", "wo_sfe", "wo_saa", "w_sha"])
    p = sub.add_parser("eval", parents=[common], help="evaluate one or all methods on the test split")
    p.add_argument("--method", default="cuffkt", choices=[*ev.METHODS, "all"])
    p.add_argument("--frequency", type=float)
    p.add_argument("--variant", choices=["full", "wo_dual", "wo_sfe", "wo_saa", "w_sha"])
    p.add_argument("--controller", choices=list(ctl.VARIANTS))
    p.add_argument("--no-timing", action="store_true", help="skip the time-overhead measurement")
    p = sub.add_parser("sweep-rank", parents=[common], help="train and score generators across ranks")
    p.add_argument("--ranks", default="0,1,2,4")
    p = sub.add_parser("shift-report", parents=[common], help="per-part KL and AUC diagnostic")
    p.add_argument("--parts", type=int, default=4)
    p.add_argument("--mode", choices=["stage", "group"], default="stage")
    p.add_argument("--threshold", type=float, default=0.01)
    p = sub.add_parser("ablate", parents=[common], help="generator and controller variants")
    p.add_argument("--what", choices=["generator", "controller", "both"], default="both")
    p.add_argument("--frequency", type=float, default=0.5, help="controller ablation selection rate")
    p.add_argument("--retrain", action="store_true", help="retrain generators even if checkpoints exist")
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    flags = {k: v for k, v in (("seed", args.seed), ("out", args.out), ("data", args.data)) if v is not None}
    return replace(cfg, **flags)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    def fail(code: int, err: BaseException) -> int:
        print(f"ktadapt {args.command}: error: {err}", file=sys.stderr)
        return code

    try:
        run = Run(_config_from_args(args))
        t0 = time.perf_counter()
        with threadpool_limits(limits=run.threads):
            COMMANDS[args.command](run, args)
        run.record(args.command, time.perf_counter() - t0)
    except (UsageError, gen.ConfigError, tuning.TuningConfigError) as err:
        return fail(EXIT_USAGE, err)
    except (ParseError, ValidationError, DatasetEmptyError, SplitSizeError, UndefinedMetricError,
            checkpoint.CheckpointError, FileNotFoundError, IsADirectoryError) as err:
        return fail(EXIT_DATA, err)
    except (bb.TrainingError, bb.EmptyLossError, FloatingPointError, ctl.DegenerateInputError,
            gen.DegenerateInputError) as err:
        return fail(EXIT_NUMERIC, err)
    except ValueError as err:
        return fail(EXIT_USAGE, err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
