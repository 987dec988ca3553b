"""Stitching a low-return prefix onto a high-return suffix.

One attempt: imagine a continuation of the prefix's last state, pick the
step count whose imagined state points most nearly toward the suffix's first
state, inpaint that many bridging states, label them with actions and
rewards, and keep the result only if the forward model agrees with every
bridging transition.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory, partition_by_return, sample_cut_segment
from .diffusion import MaskedWindow, imagine_rollout, sample_conditional
from .errors import ConfigError

DEGENERATE_NORM = 1e-12
TIE_TOL = 1e-12


@dataclass
class StitchConfig:
    horizon: int = 32
    delta_threshold: float = 2.0
    iterations: int = 200
    min_keep: int = 5
    seed: int = 0
    low_quantile: float = 0.5
    high_quantile: float = 0.8

    def __post_init__(self):
        if self.horizon < 4:
            raise ConfigError("horizon must be at least 4")
        if not self.delta_threshold > 0:
            raise ConfigError("qualification threshold must be positive")
        if self.iterations < 1:
            raise ConfigError("need at least one stitch iteration")


@dataclass
class StitchResult:
    delta: int
    stitch_states: np.ndarray
    stitch_traj: Trajectory
    max_error: float
    accepted: bool
    similarity: np.ndarray
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    imagined: np.ndarray = None


def cosine_sim(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < DEGENERATE_NORM or nv < DEGENERATE_NORM:
        warnings.warn("cosine similarity of a near-zero vector; using 0")
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def estimate_steps(imagined, target):
    """Index in ``1..H-2`` of the imagined state most similar to ``target``.

    Returns ``(delta, similarities)`` where ``similarities[i-1]`` belongs to
    index ``i``. Ties, up to rounding, go to the smallest index.
    """
    H = len(imagined)
    sims = np.array([cosine_sim(imagined[i], target) for i in range(1, H - 1)])
    best = sims.max()
    return int(np.flatnonzero(sims >= best - TIE_TOL)[0]) + 1, sims


def build_stitch_mask(s_T, delta, high_states, horizon):
    """Window ``[s_T, masked x delta, high_states...]``.

    When fewer than ``horizon - 1 - delta`` high states are supplied, the
    unfilled tail rows stay masked.
    """
    if not 1 <= delta <= horizon - 2:
        raise ValueError(f"delta {delta} outside [1, {horizon - 2}]")
    high_states = np.atleast_2d(high_states)
    if len(high_states) < 1:
        raise ValueError("need at least one state from the high trajectory")
    d = len(s_T)
    values = np.zeros((horizon, d))
    observed = np.zeros(horizon, dtype=bool)
    values[0] = s_T
    observed[0] = True
    pad = high_states[: horizon - 1 - delta]
    values[delta + 1 : delta + 1 + len(pad)] = pad
    observed[delta + 1 : delta + 1 + len(pad)] = True
    return MaskedWindow(values, observed)


def generate_stitch_states(model, schedule, mask, delta, rng):
    """Inpaint ``mask`` and return the ``delta`` bridging rows (normalized)."""
    window = sample_conditional(model, schedule, mask, rng)
    obs = mask.observed
    if not np.array_equal(window[obs], mask.values[obs]):
        raise AssertionError("inpainting changed an observed entry")
    return window[1 : delta + 1]


def wrap_up(s_T, stitch_states, high_first, models):
    """Label ``s_T -> stitch states -> s'_1`` with predicted actions and rewards.

    ``high_first`` is the high trajectory's first tuple ``(s'_1, a'_1, r'_1)``,
    copied unchanged as the last tuple.
    """
    s1, a1, r1 = high_first
    seq = np.vstack([np.atleast_2d(s_T), np.atleast_2d(stitch_states), np.atleast_2d(s1)])
    if seq.shape[1] != len(s_T) or len(s1) != len(s_T):
        raise ValueError("state dimensions do not match")
    actions = np.atleast_2d(models.inv_dyn.predict(seq[:-1], seq[1:]))
    rewards = np.atleast_1d(models.reward.predict(seq[:-1], actions))
    return Trajectory(
        seq,
        np.vstack([actions, np.atleast_2d(a1)]),
        np.concatenate([rewards, [r1]]),
        source="augmented",
    )


def qualify(stitch_traj, fwd_dyn, threshold):
    """Squared next-state errors of the forward model along the bridge.

    Evaluates the ``len - 1`` transitions ending at ``s'_1``; errors are in
    normalized state units. Accepted iff every error is below ``threshold``.
    """
    s = stitch_traj.states
    pred = fwd_dyn.predict_normalized(s[:-1], stitch_traj.actions[:-1])
    target = fwd_dyn.norm.normalize(s[1:])
    errors = np.sum((pred - target) ** 2, axis=1)
    max_error = float(errors.max())
    return max_error < threshold, max_error, errors


def assemble_augmented(prefix, stitch_traj, suffix, info=None):
    """Prefix steps ``1..T-1``, the stitch in full, then suffix steps ``2..T'``."""
    return Trajectory(
        np.vstack([prefix.states[:-1], stitch_traj.states, suffix.states[1:]]),
        np.vstack([prefix.actions[:-1], stitch_traj.actions, suffix.actions[1:]]),
        np.concatenate([prefix.rewards[:-1], stitch_traj.rewards, suffix.rewards[1:]]),
        source="augmented",
        info=dict(info or {}),
    )


def stitch_pair(prefix, suffix, denoiser, schedule, models, norm, threshold, rng):
    """Run every stage for one prefix/suffix pair."""
    H = denoiser.horizon
    s_T = prefix.states[-1]
    s_T_n = norm.normalize(s_T)
    imagined = imagine_rollout(denoiser, schedule, s_T_n, rng)
    delta, sims = estimate_steps(imagined, norm.normalize(suffix.states[0]))
    mask = build_stitch_mask(s_T_n, delta, norm.normalize(suffix.states[: H - 1 - delta]), H)
    bridge_n = generate_stitch_states(denoiser, schedule, mask, delta, rng)
    bridge = norm.denormalize(bridge_n)
    traj = wrap_up(s_T, bridge, (suffix.states[0], suffix.actions[0], suffix.rewards[0]), models)
    accepted, max_error, errors = qualify(traj, models.fwd_dyn, threshold)
    return StitchResult(delta, bridge, traj, max_error, accepted, sims, errors, imagined)


@dataclass
class AugmentationRun:
    trajectories: list
    attempts: list
    stats: dict
    results: list = field(default_factory=list)


def attempt_rng(seed, attempt):
    return np.random.default_rng([seed, attempt])


def run_augmentation(dataset, denoiser, schedule, models, config, norm=None, keep_results=False):
    """Repeat ``config.iterations`` stitch attempts, keeping qualified ones.

    Attempt ``i`` draws everything from its own stream seeded by
    ``(config.seed, i)``, so the attempt sequence does not depend on the
    threshold. ``keep_results`` retains every :class:`StitchResult`.
    """
    norm = norm or dataset.norm_stats
    if norm is None:
        raise ConfigError("normalization stats required")
    if denoiser.horizon != config.horizon:
        raise ConfigError(f"denoiser horizon {denoiser.horizon} != configured {config.horizon}")
    low, high = partition_by_return(dataset, 1.0, config.low_quantile, config.high_quantile)
    augmented, attempts, results = [], [], []
    for i in range(config.iterations):
        rng = attempt_rng(config.seed, i)
        li = int(rng.choice(low))
        hi = int(rng.choice(high))
        prefix, _ = sample_cut_segment(dataset[li], rng, config.min_keep, "prefix")
        suffix, _ = sample_cut_segment(dataset[hi], rng, config.min_keep, "suffix")
        res = stitch_pair(prefix, suffix, denoiser, schedule, models, norm, config.delta_threshold, rng)
        record = {
            "attempt": i,
            "low_index": li,
            "high_index": hi,
            "prefix_len": len(prefix),
            "suffix_start": len(dataset[hi]) - len(suffix) + 1,
            "delta": res.delta,
            "max_error": res.max_error,
            "accepted": bool(res.accepted),
        }
        attempts.append(record)
        if keep_results:
            results.append(res)
        if res.accepted:
            augmented.append(assemble_augmented(prefix, res.stitch_traj, suffix, info=record))
    accepts = len(augmented)
    if accepts == 0:
        warnings.warn(f"no stitch accepted in {config.iterations} attempts")
    errs = np.array([a["max_error"] for a in attempts])
    stats = {
        "attempts": len(attempts),
        "accepts": accepts,
        "acceptance_rate": accepts / len(attempts),
        "delta_histogram": {str(k): v for k, v in sorted(Counter(a["delta"] for a in attempts).items())},
        "max_error_quantiles": {
            str(q): float(np.quantile(errs, q)) for q in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
        },
        "config": vars(config).copy(),
        "seed": config.seed,
    }
    return AugmentationRun(augmented, attempts, stats, results)
