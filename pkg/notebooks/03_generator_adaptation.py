# %% [markdown]
# # Adapting without gradient steps
#
# A reduced version of the synthetic benchmark: after a quarter of each
# window, every learner gets better at the two hardest of four topics. The
# backbone only ever saw pre-shift steps. The generator reads the first half
# of a test learner's window and writes a personal output layer; the second
# half is scored.

# %%
import time

from ktadapt import evaluation as ev
from ktadapt import tuning
from ktadapt.synthetic import ShiftProfile

cfg = ev.BenchmarkConfig(seed=0, n_learners=300, k=60, num_concepts=12, d=16, d_in=32, max_epochs=20,
                         profile=ShiftProfile("intra", 2.0, 0.25, concept_fraction=0.5, topics=4,
                                              target="hardest"))
prep = ev.prepare(cfg)
print({name: len(ids) for name, ids in prep.splits.parts().items()})

# %%
model, log = ev.pretrain_backbone(prep)
pre, post = ev.stage_auc(model, prep)
print(f"frozen backbone on test: pre-shift AUC {pre:.4f}, post-shift AUC {post:.4f}")

# %%
t0 = time.perf_counter()
g, glog = ev.fit_generator(prep, model)
print(f"generator trained in {time.perf_counter() - t0:.1f}s, {g.param_count()} parameters")

# %% [markdown]
# Every method on the same test learners. Time overhead is the median extra
# wall time over running the frozen model.

# %%
for method in ev.METHODS:
    rep, extra = ev.evaluate_method(method, prep, model, g)
    print(f"{method:<11} AUC {rep.auc:.4f}  RMSE {rep.rmse:.4f}  +{rep.time_overhead_ms:7.1f} ms")

# %% [markdown]
# Frequency controls how many learners the controller hands to the
# generator. At 0 the result is the frozen model.

# %%
for f in (0.0, 0.2, 0.5, 1.0):
    rep, extra = ev.evaluate_method("cuffkt", prep, model, g, frequency=f, time_it=False)
    print(f"frequency {f:.1f}: {len(extra['selected']):2d} adapted, AUC {rep.auc:.4f}")

# %% [markdown]
# Trainable parameters per baseline, for scale.

# %%
for method in ("fft", "bitfit"):
    print(method, tuning.trainable_count(model, method))
