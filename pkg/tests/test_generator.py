import numpy as np
import pytest

from ktadapt import generator as gen
from ktadapt import numcore as nc
from ktadapt.backbone import DKT, Batch, knowledge_states
from ktadapt.data import ValidationError, Window
from ktadapt.generator import Generator, GeneratorConfig
from ktadapt.numcore import Value, grad_check


def window(concepts, responses=None, stamps=None, k=None, lid=0):
    n = len(concepts)
    k = k or n
    w = Window(np.zeros(k, np.int64), np.zeros(k, np.int64), np.zeros(k, np.int64), n, 0, lid)
    w.concepts[:n] = concepts
    w.responses[:n] = responses if responses is not None else [1] * n
    w.timestamps[:n] = stamps if stamps is not None else np.arange(n) * 10
    return w


def random_window(rng, c, k, length=None, lid=0):
    length = k if length is None else length
    return window(rng.integers(1, c + 1, length), rng.integers(0, 2, length),
                  np.cumsum(rng.integers(0, 50, length)), k, lid)


def small_config(**kw):
    base = dict(num_concepts=4, d=3, d_in=4, heads=2, rank=1, seed=1)
    base.update(kw)
    return GeneratorConfig(**base)


def randomize(g, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in g.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    g.params["q_emb"].data[0] = 0.0
    return g


def test_dist_d_examples():
    assert gen.dist_d([1, 1], [1, 0], 2).tolist() == [1.0, 0.5]
    assert gen.dist_d([1, 2], [0, 1], 2).tolist() == [1.0, 1.0]
    assert gen.dist_d([1, 1, 1], [1, 1, 1], 3).tolist() == [1.0, 1.0, 1.0]
    assert gen.dist_d([1, 1, 0, 0], [1, 0, 0, 0], 2).tolist() == [1.0, 0.5, 1.0, 1.0]


def test_dist_t_examples():
    assert gen.dist_t([1, 2, 1], [0, 10, 20], 3)[2] == 1.0
    assert gen.dist_t([1, 1, 1], [0, 10, 20], 3)[2] == 0.5
    assert gen.dist_t([1, 1, 2, 1], [5, 5, 5, 5], 4).tolist() == [1.0] * 4
    with pytest.raises(ValidationError):
        gen.dist_t([1, 2], [10, 5], 2)


def test_attn_weight_ranges():
    rng = np.random.default_rng(0)
    for _ in range(30):
        w = random_window(rng, 3, 12, rng.integers(1, 13))
        d = gen.dist_d(w.concepts, w.responses, w.length)
        t = gen.dist_t(w.concepts, w.timestamps, w.length)
        assert np.all((d >= 0) & (d <= 2)) and np.all((t >= 0) & (t <= 1))
        assert d[0] == t[0] == 1.0
        assert np.all(d[w.length:] == 1) and np.all(t[w.length:] == 1)


def test_embed_dual_contract():
    g = Generator(small_config())
    w = window([1, 3, 1], [0, 1, 1], k=5)
    q, r = g.embed_dual(Batch.from_windows([w]))
    assert np.all(q.data[0, 3:] == 0) and np.all(r.data[0, 3:] == 0)
    assert np.array_equal(q.data[0, 0], q.data[0, 2])
    assert not np.array_equal(r.data[0, 0], r.data[0, 1])
    with pytest.raises(IndexError):
        g.embed_dual(Batch.from_windows([window([5])]))


def test_sfe_zero_fixed_point():
    g = Generator(small_config())
    for p in g.parameters():
        p.data[...] = 0.0
    assert np.all(g.sfe(Value(np.zeros((1, 6, 3))), "q").data == 0.0)


def test_sfe_causality():
    g = randomize(Generator(small_config()))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 8, 3))
    base = g.sfe(Value(x), "q").data
    for t in range(1, 8):
        y = x.copy()
        y[:, t:] = rng.normal(size=y[:, t:].shape)
        np.testing.assert_allclose(g.sfe(Value(y), "q").data[:, :t], base[:, :t], rtol=0, atol=1e-14)


def test_sfe_gradients():
    g = randomize(Generator(small_config()))
    x = Value(np.random.default_rng(2).normal(size=(2, 8, 3)), requires_grad=True)
    head = Value(np.random.default_rng(3).normal(size=(4, 1)))
    ps = [x] + [g.params[n] for n in g.params if n.startswith("q.")]
    assert grad_check(lambda: nc.sum_(nc.tanh(g.sfe(x, "q") @ head)), ps, 1e-5) < 1e-3


def reference_mha(x, w_h, heads, attn_w=None):
    b, k, width = x.shape
    dh = width // heads
    out = np.zeros_like(x)
    for bi in range(b):
        cols = []
        for h in range(heads):
            xh = x[bi, :, h * dh:(h + 1) * dh]
            rows = []
            for i in range(k):
                s = np.array([xh[i] @ xh[j] / np.sqrt(dh) for j in range(i + 1)])
                a = np.exp(s - s.max())
                a /= a.sum()
                if attn_w is not None:
                    a = a * attn_w[bi, :i + 1]
                rows.append(sum(a[j] * xh[j] for j in range(i + 1)))
            cols.append(np.array(rows))
        out[bi] = np.concatenate(cols, axis=-1)
    return out @ w_h


def test_saa_matches_loop_reference():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 8))
    w_h = rng.normal(size=(8, 8))
    aw = rng.uniform(0, 2, size=(2, 6))
    got = gen.saa(Value(x), aw, Value(w_h), 2).data
    np.testing.assert_allclose(got, reference_mha(x, w_h, 2, aw), rtol=0, atol=1e-12)


def test_saa_examples():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 4))
    w_h = rng.normal(size=(4, 4))
    np.testing.assert_allclose(gen.saa(Value(x), np.ones((1, 1)), Value(w_h), 1).data, x @ w_h,
                               rtol=0, atol=1e-14)
    x = rng.normal(size=(1, 5, 4))
    aw = np.ones((1, 5))
    assert np.array_equal(gen.saa(Value(x), aw, Value(w_h), 2).data, gen.causal_mha(Value(x), Value(w_h), 2).data)
    with pytest.raises(gen.ConfigError):
        gen.saa(Value(np.ones((1, 2, 5))), None, None, 2)


def reference_mha_no_key(x, w_h, heads, drop):
    # unmasked attention where key ``drop`` keeps its softmax mass but adds no value
    b, k, width = x.shape
    dh = width // heads
    out = np.zeros_like(x)
    for h in range(heads):
        xh = x[0, :, h * dh:(h + 1) * dh]
        s = xh @ xh.T / np.sqrt(dh)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        a[:, drop] = 0.0
        out[0, :, h * dh:(h + 1) * dh] = a @ xh
    return out @ w_h


def test_saa_zero_weight_key_contributes_nothing():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 5, 4))
    w_h = rng.normal(size=(4, 4))
    aw = np.ones((1, 5))
    aw[0, 2] = 0.0
    got = gen.saa(Value(x), aw, Value(w_h), 2, causal=False).data
    np.testing.assert_allclose(got, reference_mha_no_key(x, w_h, 2, 2), rtol=0, atol=1e-12)


def test_fuse_examples():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    lengths = np.array([5, 3])
    zero = gen.fuse(Value(a), Value(np.zeros_like(a)), lengths).data
    assert np.array_equal(zero, a[[0, 1], [4, 2]])
    assert np.array_equal(gen.fuse(Value(a), Value(b), lengths).data, gen.fuse(Value(b), Value(a), lengths).data)
    np.testing.assert_allclose(gen.fuse(Value(2 * a), Value(2 * b), lengths).data,
                               2 * gen.fuse(Value(a), Value(b), lengths).data, rtol=0, atol=1e-14)
    with pytest.raises(nc.ShapeError):
        gen.fuse(Value(a), Value(b[:, :, :3]), lengths)


def test_generate_params_identity_and_shapes():
    backbone = DKT(4, d=3, d_in=4, seed=2)
    g = Generator(small_config(), backbone)
    for rank in (0, 1, 2):
        g2 = Generator(small_config(rank=rank), backbone)
        for name in ("w_w2", "w_w", "w_b"):
            if name in g2.params:
                g2.params[name].data[...] = 0.0
        s_k = Value(np.random.default_rng(rank).normal(size=(3, 4)))
        out = g2.synthesize(s_k)
        assert out.weight.shape == (3, 4, 4) and out.bias.shape == (3, 4)
        for i in range(3):
            assert np.array_equal(out.weight.data[i], backbone.params["out.weight"].data)
            assert np.array_equal(out.bias.data[i], backbone.params["out.bias"].data)
    with pytest.raises(gen.ConfigError):
        gen.generate_params(Value(np.ones(4)), g.params, 3, 4, 4)


def test_untrained_generator_reproduces_backbone():
    rng = np.random.default_rng(8)
    backbone = DKT(4, d=3, d_in=4, seed=2)
    g = Generator(small_config(), backbone)
    ws = [random_window(rng, 4, 8, n) for n in (8, 6)]
    layer = gen.adapt(g, backbone, ws)
    np.testing.assert_allclose(knowledge_states(backbone, ws, layer), knowledge_states(backbone, ws),
                               rtol=0, atol=1e-15)


def test_param_count_matches_instance_and_rank_steps():
    for variant in ("full", "wo_dual", "wo_sfe", "wo_saa"):
        for rank in (0, 1, 2):
            cfg = gen.generator_variant(small_config(rank=rank), variant)
            n = sum(p.data.size for p in Generator(cfg).parameters())
            assert n == gen.param_count(cfg.d, cfg.d_in, cfg.d_out, cfg.heads, rank, cfg.num_concepts,
                                        cfg.dual, cfg.use_sfe, cfg.use_saa)
    d, d_in, d_out = 32, 64, 20
    counts = [gen.param_count(d, d_in, d_out, 4, r, d_out) for r in range(0, 6)]
    for r in range(1, 5):
        assert counts[r + 1] - counts[r] == d_in + d_in * d_out
    assert counts[0] - counts[1] == d_in * d_in * d_out - (d_in + d_in * d_out)
    assert gen.param_count(d, d_in, d_out, 4, 1, 21) > gen.param_count(d, d_in, d_out, 4, 1, 20)
    full = gen.param_count(d, d_in, d_out, 4, 1, d_out)
    assert full - gen.param_count(d, d_in, d_out, 4, 1, d_out, use_saa=False) == d_in * d_in


def test_config_validation():
    with pytest.raises(gen.ConfigError):
        GeneratorConfig(4, d_in=6, heads=4).validate()
    with pytest.raises(gen.ConfigError):
        GeneratorConfig(4, d_in=8, rank=5).validate()
    with pytest.raises(gen.ConfigError):
        gen.generator_variant(small_config(), "nope")


def test_sha_equals_saa_when_weights_are_one():
    rng = np.random.default_rng(9)
    # distinct concepts keep dist_d and dist_t at 1
    ws = [window([1, 2, 3, 4], rng.integers(0, 2, 4), [0, 5, 9, 30]) for _ in range(2)]
    full = randomize(Generator(small_config()))
    sha = Generator(gen.generator_variant(small_config(), "w_sha"))
    for n, p in full.params.items():
        sha.params[n].data[...] = p.data
    b = Batch.from_windows(ws)
    assert np.array_equal(full(b).weight.data, sha(b).weight.data)


def test_adapt_pure_and_deterministic():
    rng = np.random.default_rng(10)
    backbone = DKT(4, d=3, d_in=4, seed=0)
    g = randomize(Generator(small_config(), backbone), seed=3)
    before_g = {n: p.data.copy() for n, p in g.params.items()}
    before_b = {n: p.data.copy() for n, p in backbone.params.items()}
    ws = [random_window(rng, 4, 8)]
    a, b = gen.adapt(g, backbone, ws), gen.adapt(g, backbone, ws)
    assert a.weight.data.tobytes() == b.weight.data.tobytes()
    assert a.bias.data.tobytes() == b.bias.data.tobytes()
    for n, p in g.params.items():
        assert np.array_equal(p.data, before_g[n])
        assert not p.grad.any()
    for n, p in backbone.params.items():
        assert np.array_equal(p.data, before_b[n])
    assert not np.allclose(knowledge_states(backbone, ws, a), knowledge_states(backbone, ws))
    with pytest.raises(gen.DegenerateInputError):
        gen.adapt(g, backbone, [window([1], k=4).prefix(0)])


def test_adapt_ignores_steps_after_context():
    rng = np.random.default_rng(11)
    backbone = DKT(4, d=3, d_in=4)
    g = randomize(Generator(small_config(), backbone), seed=4)
    w = random_window(rng, 4, 10)
    ctx = w.prefix(5)
    v = random_window(rng, 4, 10)
    v.concepts[:5], v.responses[:5], v.timestamps[:5] = w.concepts[:5], w.responses[:5], w.timestamps[:5]
    v.timestamps[5:] = np.maximum(v.timestamps[5:], w.timestamps[4])
    a = gen.adapt(g, backbone, ctx)
    b = gen.adapt(g, backbone, v.prefix(5))
    assert np.array_equal(a.weight.data, b.weight.data)


@pytest.mark.parametrize("variant", ["full", "wo_dual", "wo_sfe", "wo_saa", "w_sha"])
@pytest.mark.parametrize("rank", [0, 1])
def test_end_to_end_generator_gradients(variant, rank):
    rng = np.random.default_rng(12)
    backbone = DKT(4, d=3, d_in=4, seed=1)
    cfg = gen.generator_variant(small_config(rank=rank), variant)
    g = randomize(Generator(cfg, backbone), seed=5)
    batch = Batch.from_windows([random_window(rng, 4, 8, n) for n in (8, 6)])
    h = Value(backbone.hidden(batch).data)
    err = grad_check(lambda: gen.generator_loss(g, backbone, batch, h), g.parameters(), 1e-5)
    assert err < 1e-3


def synth_windows(seed, n, k=12, c=4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        w = random_window(rng, c, k, lid=i)
        # second half flips the correctness pattern of the first
        flip = rng.integers(0, 2)
        w.responses[:] = ((w.concepts + flip + (np.arange(k) >= k // 2)) % 2)
        out.append(w)
    return out


def test_train_generator_freezes_backbone_and_is_seeded():
    backbone = DKT(4, d=4, d_in=4, seed=0)
    before = {n: p.data.copy() for n, p in backbone.params.items()}
    cfg = gen.GenTrainConfig(max_epochs=3, patience=3, batch_size=8, lr=0.01, seed=2)
    runs = []
    for _ in range(2):
        g = Generator(small_config(), backbone)
        gen.train_generator(g, backbone, synth_windows(0, 24), synth_windows(1, 8), cfg)
        runs.append([p.data.copy() for p in g.parameters()])
        for n, p in backbone.params.items():
            assert np.array_equal(p.data, before[n]) and not p.grad.any()
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("variant", ["full", "wo_dual", "wo_sfe", "wo_saa", "w_sha"])
def test_variants_train(variant):
    backbone = DKT(4, d=4, d_in=4, seed=0)
    g = Generator(gen.generator_variant(small_config(), variant), backbone)
    _, log = gen.train_generator(g, backbone, synth_windows(0, 16), synth_windows(1, 8),
                                 gen.GenTrainConfig(max_epochs=2, batch_size=8, lr=0.01))
    assert len(log.valid_auc) == 2 and all(np.isfinite(log.valid_auc))


def test_checkpoint_roundtrip(tmp_path):
    g = randomize(Generator(small_config(rank=2, dual=False)), seed=6)
    gen.save(g, tmp_path / "g.ckpt")
    back = gen.load(tmp_path / "g.ckpt")
    assert back.config == g.config
    for n, p in g.params.items():
        assert np.array_equal(p.data, back.params[n].data)
