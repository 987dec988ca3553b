"""
Stitching one pair of trajectories
==================================

Two demonstration families in an open point maze never meet: family A
leaves the start and wanders east, family B walks north into the goal.
Here we train the models on a small dataset and stitch one A prefix onto one
B suffix, printing each stage.
"""

import warnings

import numpy as np

from trajstitch.aux_models import AuxConfig, train_aux_models
from trajstitch.data import partition_by_return, sample_cut_segment
from trajstitch.diffusion import DenoiserConfig, build_cosine_schedule, train_denoiser
from trajstitch.maze import PointMazeSpec, generate_offline_dataset
from trajstitch.stitch import assemble_augmented, stitch_pair

warnings.simplefilter("ignore")
rng = np.random.default_rng(1)
spec = PointMazeSpec()

###############################################################################
# Data
# ----

ds = generate_offline_dataset(spec, "disjoint-families", 20, rng)
low, high = partition_by_return(ds, 1.0, 0.5, 0.8)
print(len(ds), "trajectories;", len(low), "low-return,", len(high), "high-return")

###############################################################################
# Models
# ------
# Budgets are small so this runs in about a minute; the benchmark config
# trains longer.

schedule = build_cosine_schedule(100)
denoiser = train_denoiser(ds, schedule, DenoiserConfig(horizon=16, hidden=(128, 128), steps=2500, batch_size=32), rng)
aux = train_aux_models(ds, AuxConfig(inv_hidden=(64, 64), dyn_hidden=(64, 64), steps=1500), rng)
print("forward model held-out mse", aux.fwd_dyn.val_loss)

###############################################################################
# Stitch attempts
# ---------------
# Each attempt cuts a prefix from a random family-A trajectory and a suffix
# from a random family-B one. The forward model rejects bridges it does not
# believe; we keep going until one qualifies.

for attempt in range(20):
    prefix, _ = sample_cut_segment(ds[int(rng.choice(low))], rng, 5, "prefix")
    suffix, _ = sample_cut_segment(ds[int(rng.choice(high))], rng, 5, "suffix")
    res = stitch_pair(prefix, suffix, denoiser, schedule, aux, ds.norm_stats, 2.0, rng)
    print(f"attempt {attempt}: delta {res.delta:2d}, max error {res.max_error:.3f}", "accepted" if res.accepted else "rejected")
    if res.accepted:
        break

print("prefix ends at", np.round(prefix.states[-1], 2), "; suffix starts at", np.round(suffix.states[0], 2))
print("bridge states\n", np.round(res.stitch_states, 2))
print("per-transition forward-model errors", np.round(res.errors, 3))

###############################################################################
# The stitched trajectory keeps the prefix, the bridge and the suffix, and
# inherits the suffix's goal reward.

gen = assemble_augmented(prefix, res.stitch_traj, suffix)
print(len(prefix), "+", len(suffix), "+", res.delta, "=", len(gen), "steps; discounted return", round(gen.total_return(0.99), 3))
