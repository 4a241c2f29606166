import subprocess
import sys

import numpy as np
import pytest

from ktadapt import backbone as bb
from ktadapt import cli
from ktadapt import evaluation as ev
from ktadapt import generator as gen
from ktadapt.data import Interaction, InteractionSequence, read_manifest, write_interactions

SMALL = ["n_learners=60", "k=20", "num_concepts=6", "d=8", "d_in=8", "heads=2", "max_epochs=3",
         "patience=2", "tune_epochs=1", "bottleneck=2", "timing_repeats=3"]


def run(cmd, out, *extra, sets=SMALL):
    argv = [cmd, "--out", str(out), *extra]
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("prepare", out) == 0
    assert run("train", out) == 0
    assert run("train-gen", out) == 0
    return out


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--method", "lora"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    assert cli.main(["prepare", "--out", str(tmp_path), "--set", "bogus=1"]) == 1
    assert cli.main(["prepare", "--out", str(tmp_path), "--set", "k=ten"]) == 1
    assert cli.main(["prepare", "--out", str(tmp_path), "--set", "ratios=7:1:1"]) == 1
    assert cli.main(["prepare", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert "unknown config key 'bogus'" in capsys.readouterr().err


def test_config_file_overrides_and_hash(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nk = 30\nlr = 0.01   # faster\nseed=4\n")
    cfg = cli.load_config(str(path), ["k=40"])
    assert (cfg.k, cfg.lr, cfg.seed) == (40, 0.01, 4)
    assert cli.RunConfig().digest() == cli.RunConfig(out="elsewhere").digest()
    assert cli.RunConfig().digest() != cli.RunConfig(seed=1).digest()
    with pytest.raises(cli.UsageError, match="line|:2"):
        cli.parse_config_text("k = 3\nnonsense\n", "x.cfg")


def test_default_config_is_the_benchmark():
    bench = cli.RunConfig().benchmark()
    ref = ev.BenchmarkConfig()
    for name in ("n_learners", "k", "num_concepts", "profile", "d", "d_in", "heads", "rank", "ratios"):
        assert getattr(bench, name) == getattr(ref, name)
    assert bench.named_streams


def test_named_streams_differ_and_repeat():
    cfg = ev.BenchmarkConfig(seed=3, named_streams=True)
    seeds = {cfg.stream(n) for n in ("data", "init", "shuffle")}
    assert len(seeds) == 3
    assert cfg.stream("data") == ev.BenchmarkConfig(seed=3, named_streams=True).stream("data")
    assert ev.BenchmarkConfig(seed=3).stream("data") == 3


def test_prepare_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("prepare", a) == 0 and run("prepare", b) == 0
    for name in ("manifest.tsv", "interactions.csv", "remap.tsv", "shift.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert sorted(read_manifest(a / "manifest.tsv").all_ids()) == list(range(60))
    assert f"# config_hash = {cli.load_config(None, SMALL).digest()}" in (a / "manifest.tsv").read_text()


def test_prepare_ratio_override_is_normalised(tmp_path):
    assert run("prepare", tmp_path, sets=SMALL + ["ratios=8:1:0.5:0.5"]) == 0
    splits = read_manifest(tmp_path / "manifest.tsv")
    assert [len(p) for p in splits.parts().values()] == [48, 6, 3, 3]


def test_prepare_from_csv_and_bad_csv(tmp_path, capsys):
    rng = np.random.default_rng(0)
    seqs = []
    for lid in range(30):
        xs = [Interaction(int(q), frozenset({int(q) % 4, int(q) % 3 + 10}), int(rng.integers(0, 2)), 10 * t)
              for t, q in enumerate(rng.integers(0, 12, 12))]
        seqs.append(InteractionSequence(lid, xs))
    seqs.append(InteractionSequence(99, seqs[0].interactions[:3]))   # too short, filtered
    write_interactions(tmp_path / "log.csv", seqs)
    out = tmp_path / "run"
    assert run("prepare", out, "--data", str(tmp_path / "log.csv")) == 0
    assert sorted(read_manifest(out / "manifest.tsv").all_ids()) == list(range(30))
    remap = (out / "remap.tsv").read_text().splitlines()
    assert remap[0] == "new_id\tconcepts" and len(remap) - 1 == 12
    assert not (out / "shift.tsv").exists()

    bad = tmp_path / "bad.csv"
    bad.write_text("learner,question,concepts,response,timestamp\n1,2,3,1,10\n1,2,3,7,11\n")
    assert run("prepare", tmp_path / "bad", "--data", str(bad)) == 2
    assert "line 3" in capsys.readouterr().err
    assert run("prepare", tmp_path / "bad", "--data", str(tmp_path / "absent.csv")) == 2


def test_missing_artifacts_exit_two(tmp_path, capsys):
    assert run("train", tmp_path) == 2
    assert "manifest.tsv" in capsys.readouterr().err
    assert run("prepare", tmp_path) == 0
    assert run("eval", tmp_path) == 2
    assert "backbone.ckpt" in capsys.readouterr().err


def test_training_failure_exits_three(tmp_path, capsys):
    assert run("prepare", tmp_path) == 0
    with np.errstate(all="ignore"):
        assert run("train", tmp_path, sets=SMALL + ["lr=1e308"]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_train_log_and_seeded_checkpoints(trained, tmp_path):
    rows = ev.read_table(trained / "train_log.tsv")
    best = [float(r["best_auc"]) for r in rows]
    assert best == sorted(best)
    assert best == list(np.maximum.accumulate([float(r["valid_auc"]) for r in rows]))
    assert {r["config_hash"] for r in rows} == {cli.load_config(None, SMALL).digest()}
    again = tmp_path / "again"
    assert run("prepare", again) == 0 and run("train", again) == 0
    assert (again / "backbone.ckpt").read_bytes() == (trained / "backbone.ckpt").read_bytes()
    assert bb.load(trained / "backbone.ckpt").trained


def test_eval_all_methods_share_split(trained, capsys):
    assert run("eval", trained, "--method", "all", "--no-timing") == 0
    rows = ev.read_table(trained / "eval.tsv")
    assert [r["method"] for r in rows] == list(ev.METHODS)
    assert len({(r["seed"], r["n_scored"], r["split_mode"]) for r in rows}) == 1
    assert (trained / "scores-cuffkt.tsv").read_text().splitlines()[1].startswith("learner_id\t")
    assert "cuffkt+fft" in capsys.readouterr().out


def test_eval_frequency_zero_equals_frozen(trained):
    assert run("eval", trained, "--method", "frozen") == 0
    frozen = ev.read_table(trained / "eval.tsv")[0]
    assert run("eval", trained, "--method", "cuffkt", "--frequency", "0", "--no-timing") == 0
    none = ev.read_table(trained / "eval.tsv")[0]
    assert none["auc"] == frozen["auc"] and none["selected"] == "0"


def test_eval_zero_synthesis_generator_equals_frozen(trained, tmp_path):
    out = tmp_path / "zero"
    out.mkdir()
    for name in ("manifest.tsv", "interactions.csv", "shift.tsv", "backbone.ckpt"):
        (out / name).write_bytes((trained / name).read_bytes())
    model = bb.load(out / "backbone.ckpt")
    cfg = cli.load_config(None, SMALL).benchmark().generator_config()
    gen.save(gen.Generator(cfg, model), out / "generator-full.ckpt")
    assert run("eval", out, "--method", "frozen") == 0
    frozen = ev.read_table(out / "eval.tsv")[0]["auc"]
    assert run("eval", out, "--method", "cuffkt", "--no-timing") == 0
    assert ev.read_table(out / "eval.tsv")[0]["auc"] == frozen


def test_sweep_rank_param_accounting(trained):
    assert run("sweep-rank", trained, "--ranks", "0,1,2,3") == 0
    rows = ev.read_table(trained / "sweep_rank.tsv")
    assert [int(r["rank"]) for r in rows] == [0, 1, 2, 3]
    counts = [int(r["param_count"]) for r in rows]
    d_in, d_out = 8, 6
    assert np.diff(counts[1:]).tolist() == [d_in + d_in * d_out] * 2
    assert all(0.0 <= float(r["auc"]) <= 1.0 for r in rows)
    assert run("sweep-rank", trained, "--ranks", "a,b") == 1


def test_shift_report_and_ablate(trained):
    assert run("shift-report", trained, "--parts", "3") == 0
    rows = ev.read_table(trained / "shift_report-stage.tsv")
    assert [r["part_index"] for r in rows] == ["1", "2", "3"] and float(rows[0]["kl_vs_part1"]) == 0.0
    assert run("ablate", trained, "--what", "controller") == 0
    rows = ev.read_table(trained / "ablate-controller.tsv")
    assert [r["variant"] for r in rows] == ["full", "wo_kl", "wo_zpd", "wo_rel", "random"]


def test_thread_count_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv("KTADAPT_THREADS", "2")
    assert run("prepare", tmp_path) == 0
    line = (tmp_path / "runs.tsv").read_text().splitlines()[-1].split("\t")
    assert line[0] == "prepare" and line[3] == "2"
    assert "# threads = 2" in (tmp_path / "manifest.tsv").read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ktadapt", "prepare", "--out", str(tmp_path),
                           "--set", "n_learners=20", "--set", "k=10"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "prepared 20 learners" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "ktadapt", "train"], capture_output=True, text=True,
                          cwd=tmp_path)
    assert proc.returncode in (1, 2)
