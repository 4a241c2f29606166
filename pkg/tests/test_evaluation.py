import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ktadapt import evaluation as ev
from ktadapt.backbone import DKT, TrainConfig, train
from ktadapt.data import first_windows
from ktadapt.metrics import UndefinedMetricError, auc, rmse
from ktadapt.synthetic import ShiftProfile, synth_benchmark


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def test_auc_examples():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 1, 1]) == 0.5
    assert auc([0.9, 0.4, 0.6], [1, 0, 1]) == 1.0
    assert auc([0.9, 0.4, 0.6], [1, 0, 0]) == 1.0
    assert auc([0.9, 0.4, 0.6], [0, 0, 1]) == 0.5
    assert auc([0.9, 0.4, 0.6], [0, 1, 1]) == 0.0
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]), st.integers(0, 1)),
                min_size=2, max_size=80))
def test_auc_matches_pair_oracle_with_ties(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=4, max_size=60), st.integers(0, 2**31))
def test_auc_invariant_to_monotone_transform(ticks, seed):
    scores = np.asarray(ticks) / 100.0
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    if len(set(labels.tolist())) < 2:
        return
    assert auc(scores, labels) == auc(scores ** 3 + 2 * scores, labels)


def test_rmse_examples():
    assert rmse([1, 0, 1], [1, 0, 1]) == 0.0
    assert rmse([0.5] * 4, [1, 0, 1, 0]) == 0.5
    assert rmse([0.9, 0.2], [1, 0]) == pytest.approx(math.sqrt(0.025), abs=1e-15)
    assert rmse([0.9, 0.2], [1, 0]) == pytest.approx(0.1581, abs=1e-4)
    with pytest.raises(ValueError):
        rmse([], [])


def test_time_overhead_floor_and_calibration():
    noop = lambda: None
    assert ev.time_overhead(noop, noop, 5) < 1.0
    assert ev.time_overhead(noop, lambda: time.sleep(0.02), 3) == 0.0
    slept = ev.time_overhead(lambda: time.sleep(0.05), noop, 3)
    assert 40.0 <= slept <= 60.0
    with pytest.raises(ValueError):
        ev.time_overhead(noop, noop, 2)


def test_thread_count_reads_environment(monkeypatch):
    monkeypatch.setenv("KTADAPT_THREADS", "3")
    assert ev.thread_count() == 3
    monkeypatch.delenv("KTADAPT_THREADS")
    monkeypatch.setenv("OMP_NUM_THREADS", "2")
    assert ev.thread_count() == 2


def test_report_tables_roundtrip(tmp_path):
    r = ev.EvalReport("cuffkt", 0.75, 0.41, 3.5, "temporal", 2)
    path = tmp_path / "r.tsv"
    ev.write_table(path, [r])
    ev.write_table(path, [ev.EvalReport("frozen", 0.7, 0.45, 0.0, "temporal", 2)])
    rows = ev.read_table(path)
    assert [row["method"] for row in rows] == ["cuffkt", "frozen"]
    assert float(rows[0]["auc"]) == 0.75 and rows[0]["seed"] == "2"
    s = ev.ShiftReport(1, 0.0, 0.7, 0.01)
    assert not s.shifted and ev.ShiftReport(2, 0.5, 0.6, 0.01).shifted
    ev.write_table(tmp_path / "s.tsv", [s])
    assert ev.read_table(tmp_path / "s.tsv")[0]["kl_vs_part1"] == "0.000000"


def test_synth_benchmark_seeded_and_shifted():
    a = synth_benchmark(3, 30, 40, ShiftProfile("intra", 2.0, 0.5))
    b = synth_benchmark(3, 30, 40, ShiftProfile("intra", 2.0, 0.5))
    assert [s.interactions for s in a.sequences] == [s.interactions for s in b.sequences]
    first, second = [], []
    for seed in range(5):
        ds = synth_benchmark(seed, 200, 60, ShiftProfile("intra", 2.0, 0.5))
        r = np.array([[x.response for x in s.interactions] for s in ds.sequences])
        first.append(r[:, :30].mean())
        second.append(r[:, 30:].mean())
    assert np.mean(second) - np.mean(first) > 0.2


def test_hardest_target_hits_hardest_topics():
    ds = synth_benchmark(0, 20, 20, ShiftProfile("intra", 2.0, 0.5, concept_fraction=0.5, topics=4,
                                                 target="hardest"))
    units = np.arange(20) * 4 // 20
    mean_diff = [ds.difficulty[units == u].mean() for u in range(4)]
    hit = set(np.argsort(mean_diff)[-2:])
    expect = np.isin(units, list(hit)) * 2.0
    assert np.all(ds.jump == expect[None, :])


def test_inter_profile_offsets_groups():
    ds = synth_benchmark(1, 400, 30, ShiftProfile("inter", 2.0, groups=4))
    r = np.array([np.mean([x.response for x in s.interactions]) for s in ds.sequences])
    assert r[ds.group == 3].mean() > r[ds.group == 0].mean() + 0.2


def quick_cfg(seed=0):
    return TrainConfig(max_epochs=8, patience=3, batch_size=32, lr=0.01, seed=seed)


def test_shift_diagnostic_zero_magnitude_is_flat():
    ds = synth_benchmark(0, 400, 40, ShiftProfile("intra", 0.0))
    reps = ev.shift_diagnostic(ds.sequences, ds.num_concepts, 4, train_config=quick_cfg(), d=8, d_in=16)
    assert reps[0].kl_vs_part1 == 0.0
    assert all(r.kl_vs_part1 < 0.01 for r in reps)
    aucs = [r.auc_on_part for r in reps]
    assert max(aucs) - min(aucs) < 0.1


def test_shift_diagnostic_two_regimes_trend():
    ds = synth_benchmark(0, 200, 40, ShiftProfile("intra", 2.0, 0.5, concept_fraction=0.5, topics=4,
                                                  target="hardest"))
    reps = ev.shift_diagnostic(ds.sequences, ds.num_concepts, 4, train_config=quick_cfg(), d=8, d_in=16)
    assert reps[3].kl_vs_part1 > reps[1].kl_vs_part1
    assert reps[3].auc_on_part < reps[1].auc_on_part


def test_shift_diagnostic_group_mode_and_errors():
    ds = synth_benchmark(2, 80, 20, ShiftProfile("inter", 2.0))
    enc = DKT(ds.num_concepts, d=8, d_in=8)
    ws = first_windows(ds.sequences, 20)
    train(enc, ws[:70], ws[70:], quick_cfg())
    reps = ev.shift_diagnostic(ds.sequences, ds.num_concepts, 4, mode="group", encoder=enc,
                               train_config=quick_cfg(), d=8, d_in=8)
    assert len(reps) == 4 and reps[0].kl_vs_part1 == 0.0
    with pytest.raises(ValueError):
        ev.shift_diagnostic(ds.sequences, ds.num_concepts, 1)
    with pytest.raises(ev.SplitSizeError):
        ev.shift_diagnostic(ds.sequences[:5], ds.num_concepts, 4, mode="group", encoder=enc)


def tiny_benchmark(seed=0, **kw):
    base = dict(seed=seed, n_learners=60, k=20, num_concepts=6, d=8, d_in=8, heads=2,
                max_epochs=3, patience=2, tune_epochs=1, bottleneck=2,
                profile=ShiftProfile("intra", 2.0, 0.25, concept_fraction=0.5, topics=2, target="hardest"))
    base.update(kw)
    return ev.BenchmarkConfig(**base)


def test_evaluate_every_method_on_tiny_benchmark():
    prep = ev.prepare(tiny_benchmark())
    assert sorted(prep.splits.all_ids()) == list(range(60))
    model, _ = ev.pretrain_backbone(prep)
    g, _ = ev.fit_generator(prep, model)
    for method in ev.METHODS:
        rep, _ = ev.evaluate_method(method, prep, model, g, time_it=method in ("cuffkt", "fft"))
        assert 0.0 <= rep.auc <= 1.0 and 0.0 <= rep.rmse <= 1.0
        assert rep.time_overhead_ms >= 0.0 and rep.n_scored > 0
    with pytest.raises(ValueError):
        ev.evaluate_method("cuffkt", prep, model, None)
    with pytest.raises(ValueError):
        ev.evaluate_method("lora", prep, model, g)


def test_frequency_zero_equals_frozen():
    prep = ev.prepare(tiny_benchmark(1))
    model, _ = ev.pretrain_backbone(prep)
    g, _ = ev.fit_generator(prep, model)
    frozen, _ = ev.evaluate_method("frozen", prep, model, time_it=False)
    none, extra = ev.evaluate_method("cuffkt", prep, model, g, frequency=0.0, time_it=False)
    assert none.auc == frozen.auc and extra["selected"] == set()


def test_group_split_benchmark_prepares():
    prep = ev.prepare(tiny_benchmark(2, split_mode="group", profile=ShiftProfile("inter", 2.0)))
    assert prep.splits.mode == "group" and not prep.stage_split
    assert [len(p) for p in prep.splits.parts().values()] == [42, 6, 6, 6]


def test_run_rlpa_is_deterministic():
    a = ev.run_rlpa(tiny_benchmark(3))
    b = ev.run_rlpa(tiny_benchmark(3))
    assert (a.pre_shift_auc, a.post_shift_auc, a.frozen_auc, a.adapted_auc) == \
           (b.pre_shift_auc, b.post_shift_auc, b.frozen_auc, b.adapted_auc)
    assert a.degradation == a.pre_shift_auc - a.post_shift_auc
