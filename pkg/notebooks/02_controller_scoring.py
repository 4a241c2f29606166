# %% [markdown]
# # Who drifted? Scoring learners
#
# The controller multiplies two factors per learner:
#
# * a KL factor, 1 + KL between the knowledge state at the end of the window
#   and at its midpoint
# * a ZPD factor, built from how far the full-window correct rate moved away
#   from the first-half rate, weighted by window length
#
# Here a cohort of 20 learners holds two "flippers" who get everything wrong
# and then everything right. Half of the others keep their success rate but
# switch to a different block of concepts midway.

# %%
from ktadapt import controller as ctl
from ktadapt.backbone import DKT, TrainConfig, train
from ktadapt.data import first_windows
from ktadapt.synthetic import ShiftProfile, flip_cohort, synth_benchmark

seed = 0
ds = synth_benchmark(seed, 240, 20, ShiftProfile("none"), num_concepts=10)
bg = first_windows(ds.sequences, 20)
model = DKT(10, seed=seed)
train(model, bg[:200], bg[200:], TrainConfig(max_epochs=10, patience=3, batch_size=32, lr=0.005, seed=seed))

seqs, flippers = flip_cohort(seed)
ws = first_windows(seqs, 20)
print("flippers:", sorted(flippers))

# %%
scores = ctl.score_windows(model, ws)
chosen = ctl.select(scores, 0.1)
print(ctl.score_report(sorted(scores, key=lambda s: -s.score)[:6], chosen))

# %% [markdown]
# Dropping one factor at a time. Without ZPD the score is the KL factor
# alone, and concept-switching learners compete with the flippers.

# %%
for variant in ("full", "wo_kl", "wo_zpd", "wo_rel", "random"):
    picked, _ = ctl.choose(model, ws, 0.1, variant)
    print(f"{variant:<7} picks {sorted(picked)}  {'hit' if picked == flippers else 'miss'}")

# %% [markdown]
# Over five seeds the full score should always recover the pair.

# %%
for s in range(5):
    ds = synth_benchmark(s, 240, 20, ShiftProfile("none"), num_concepts=10)
    bg = first_windows(ds.sequences, 20)
    m = DKT(10, seed=s)
    train(m, bg[:200], bg[200:], TrainConfig(max_epochs=10, patience=3, batch_size=32, lr=0.005, seed=s))
    seqs, fl = flip_cohort(s)
    ws = first_windows(seqs, 20)
    print(s, {v: ctl.choose(m, ws, 0.1, v)[0] == fl for v in ("full", "wo_zpd")})
