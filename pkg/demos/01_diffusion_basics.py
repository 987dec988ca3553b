"""
Noise schedule, training windows and inpainting
===============================================

A short tour of the diffusion half of the package on a toy problem:
straight lines in the plane. We train a small window denoiser, then ask it
to fill in the middle of a line whose two ends are known.
"""

import warnings

import numpy as np

from trajstitch.data import Dataset, NormStats, Trajectory
from trajstitch.diffusion import (
    DenoiserConfig,
    MaskedWindow,
    build_cosine_schedule,
    forward_noise,
    make_training_mask,
    sample_conditional,
    train_denoiser,
)

rng = np.random.default_rng(0)

###############################################################################
# The cosine schedule
# -------------------
# ``alpha_bar[k]`` is the fraction of signal left after ``k`` noising steps.
# It starts just under 1 and ends close to 0.

schedule = build_cosine_schedule(100)
for k in (1, 25, 50, 75, 100):
    print(f"k={k:3d}  alpha_bar={schedule.alpha_bar[k]:.4f}")

# a noised window at the half-way point
window = np.linspace([0, 0], [1, 1], 8)
noisy = forward_noise(window, 50, rng.standard_normal(window.shape), schedule)
print(np.round(noisy, 2))

###############################################################################
# Training masks
# --------------
# During training two intervals are hidden. The first row is always kept,
# the last row is always hidden.

for _ in range(4):
    print("".join("o" if f else "." for f in make_training_mask(12, rng)))

###############################################################################
# A denoiser for lines
# --------------------
# 400 random lines of 10 points each. Identity normalization keeps the
# numbers easy to read.

lines = []
for _ in range(400):
    start, step = rng.uniform(-1, 1, 2), rng.uniform(-0.2, 0.2, 2)
    lines.append(start + np.arange(10)[:, None] * step)
ds = Dataset([Trajectory(p, np.zeros((10, 2)), np.zeros(10)) for p in lines])
ds.norm_stats = NormStats(np.zeros(2), np.ones(2))

cfg = DenoiserConfig(horizon=10, hidden=(128, 128), steps=6000, batch_size=16)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    model = train_denoiser(ds, schedule, cfg, rng)
print("loss", model.loss_curve[0][1], "->", model.loss_curve[-1][1])

###############################################################################
# Inpainting
# ----------
# Observe the two ends of the line from (0, 0) to (0.9, 0.9). The observed
# rows come back unchanged and the middle lies near the diagonal. Spacing
# along the diagonal is looser at this training budget.

values = np.zeros((10, 2))
values[9] = [0.9, 0.9]
observed = np.zeros(10, bool)
observed[[0, 9]] = True
out = sample_conditional(model, schedule, MaskedWindow(values, observed), rng)
print(np.round(out, 2))
print("ends unchanged:", np.array_equal(out[observed], values[observed]))
print("mean distance to diagonal:", np.abs(out[:, 0] - out[:, 1]).mean() / np.sqrt(2))
