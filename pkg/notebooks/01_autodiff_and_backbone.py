# %% [markdown]
# # Tape autodiff and the DKT backbone
#
# Everything trainable in `ktadapt` runs on a small reverse-mode engine over
# float64 numpy arrays. Ops record themselves on the active `Tape`;
# `backward` replays the tape in reverse once.

# %%
import numpy as np

from ktadapt import numcore as nc
from ktadapt.backbone import DKT, Batch, TrainConfig, knowledge_states, predict, train
from ktadapt.data import first_windows
from ktadapt.metrics import auc
from ktadapt.numcore import Tape, Value, backward, grad_check
from ktadapt.synthetic import ShiftProfile, synth_benchmark

rng = np.random.default_rng(0)
a = Value(rng.normal(size=(3, 4)), requires_grad=True)
w = Value(rng.normal(size=(4, 2)), requires_grad=True)

with Tape() as tape:
    h = nc.tanh(a @ w)
    loss = nc.sum_(h * h)
    backward(loss)
print("tape length", len(tape), "loss", float(loss.data))
print("dloss/dw\n", w.grad.round(4))

# %% [markdown]
# Central differences agree with the tape to well under 1e-6 here.

# %%
err = grad_check(lambda: nc.sum_(nc.tanh(a @ w) * nc.tanh(a @ w)), [a, w])
print(f"max relative gradient error {err:.2e}")

# %% [markdown]
# ## A stationary cohort
#
# 300 simulated learners, 40 steps each, 8 concepts, no regime shift. One
# window per learner; `concepts` are stored shifted by one so 0 means padding.

# %%
ds = synth_benchmark(seed=1, n_learners=300, k=40, profile=ShiftProfile("none"), num_concepts=8)
ws = first_windows(ds.sequences, 40)
train_ws, valid_ws, test_ws = ws[:220], ws[220:260], ws[260:]
print(ws[0].concepts[:10], ws[0].responses[:10])

# %%
model = DKT(8, d=16, d_in=32, seed=0)
model, log = train(model, train_ws, valid_ws, TrainConfig(max_epochs=15, patience=3, batch_size=32, lr=0.01))
print("valid AUC by epoch", np.round(log.valid_auc, 3))
print("best", round(log.best_auc, 4), "at epoch", log.best_epoch)

# %%
probs, labels = predict(model, Batch.from_windows(test_ws))
print(f"held-out AUC {auc(probs, labels):.4f} on {len(labels)} predictions")

# %% [markdown]
# Knowledge states are the per-concept sigmoid outputs after each step. For
# one learner, watch the state of the concept they practise most.

# %%
states = knowledge_states(model, test_ws[:1])[0]
c = np.bincount(test_ws[0].concepts[:test_ws[0].length]).argmax() - 1
for t in range(0, test_ws[0].length, 5):
    print(t, "concept", test_ws[0].concepts[t] - 1, "answer", test_ws[0].responses[t],
          f"p(concept {c}) = {states[t, c]:.3f}")
