# %% [markdown]
# # Seeing the shift, and what rank buys
#
# Cut each learner's sequence into four stages. Compare each stage's
# per-concept correct rates with stage 1 (KL), and score a model trained only
# on stage 1 on every stage. Drift shows up as KL rising while AUC falls.

# %%
import numpy as np

from ktadapt import evaluation as ev
from ktadapt import generator as gen
from ktadapt.backbone import TrainConfig
from ktadapt.synthetic import ShiftProfile, synth_benchmark

quick = TrainConfig(max_epochs=10, patience=3, batch_size=32, lr=0.005)
for label, profile in (("stationary", ShiftProfile("none")),
                       ("hardest-topic jump", ShiftProfile("intra", 2.0, 0.5, concept_fraction=0.5, topics=4,
                                                           target="hardest"))):
    ds = synth_benchmark(0, 300, 40, profile, num_concepts=10)
    reps = ev.shift_diagnostic(ds.sequences, 10, 4, train_config=quick, d=8, d_in=16)
    print(label)
    for r in reps:
        print(f"  stage {r.part_index}: KL {r.kl_vs_part1:.4f}  AUC {r.auc_on_part:.4f}"
              + ("  shifted" if r.shifted else ""))

# %% [markdown]
# ## Generator size against rank
#
# Rank 0 means the weight map is a full (d_in*d_out) x d_in matrix. From
# rank 1 on, each extra rank adds one row of W1 (d_in) and one column of W2
# (d_in*d_out).

# %%
d, d_in, d_out, h = 32, 64, 20, 4
counts = {r: gen.param_count(d, d_in, d_out, h, r, d_out) for r in range(0, 6)}
for r, n in counts.items():
    print(f"rank {r}: {n:>7,d}")
print("deltas", np.diff([counts[r] for r in range(1, 6)]), "expected", d_in + d_in * d_out)
