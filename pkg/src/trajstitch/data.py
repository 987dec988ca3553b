"""Trajectories, datasets, JSON-lines storage and return bookkeeping."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, ParseError, SchemaError
from .io import atomic_write_text

STD_FLOOR = 1e-6
SOURCES = ("original", "augmented")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    source: str = "original"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        T = len(self.states)
        if len(self.actions) != T or len(self.rewards) != T:
            raise DatasetError(
                f"{T} states, {len(self.actions)} actions, {len(self.rewards)} rewards"
            )
        if T < 2:
            raise DatasetError(f"trajectory needs at least 2 steps, got {T}")
        for name in ("states", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"non-finite entry in {name}")
        if self.source not in SOURCES:
            raise DatasetError(f"unknown source tag {self.source!r}")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def total_return(self, gamma=1.0):
        return compute_returns(self, gamma).total

    def slice(self, start, stop):
        return Trajectory(
            self.states[start:stop].copy(),
            self.actions[start:stop].copy(),
            self.rewards[start:stop].copy(),
            self.source,
            dict(self.info),
        )

    def to_record(self):
        rec = {
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "source": self.source,
        }
        if self.info:
            rec["info"] = self.info
        return rec


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std shapes differ")
        if np.any(self.std < STD_FLOOR):
            raise ValueError("std below floor")

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, v):
        return np.asarray(v, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


def normalize_state(stats, v):
    return stats.normalize(v)


def denormalize_state(stats, v):
    return stats.denormalize(v)


class Dataset:
    def __init__(self, trajectories, norm_stats=None):
        trajectories = list(trajectories)
        if not trajectories:
            raise SchemaError("empty dataset")
        d_s, d_a = trajectories[0].state_dim, trajectories[0].action_dim
        for i, t in enumerate(trajectories):
            if t.state_dim != d_s or t.action_dim != d_a:
                raise SchemaError(
                    f"trajectory {i} has dims ({t.state_dim}, {t.action_dim}), expected ({d_s}, {d_a})"
                )
        self.trajectories = trajectories
        self.state_dim = d_s
        self.action_dim = d_a
        self.norm_stats = norm_stats

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def all_states(self):
        return np.concatenate([t.states for t in self.trajectories])

    def transitions(self):
        """Consecutive ``(s, a, r, s_next)`` arrays over every trajectory."""
        s, a, r, s2 = [], [], [], []
        for t in self.trajectories:
            s.append(t.states[:-1])
            a.append(t.actions[:-1])
            r.append(t.rewards[:-1])
            s2.append(t.states[1:])
        return np.concatenate(s), np.concatenate(a), np.concatenate(r), np.concatenate(s2)


def stats_path_for(path):
    path = Path(path)
    return path.with_name(path.stem + ".stats.json")


def load_dataset(path):
    path = Path(path)
    trajectories = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record is not an object")
            missing = [k for k in ("states", "actions", "rewards") if k not in rec]
            if missing:
                raise ParseError(lineno, f"missing keys {missing}")
            try:
                traj = Trajectory(
                    np.array(rec["states"], dtype=np.float64),
                    np.array(rec["actions"], dtype=np.float64),
                    np.array(rec["rewards"], dtype=np.float64),
                    rec.get("source", "original"),
                    rec.get("info", {}),
                )
            except (DatasetError, ValueError, TypeError) as e:
                raise ParseError(lineno, str(e)) from None
            if traj.states.ndim != 2 or traj.actions.ndim != 2:
                raise ParseError(lineno, "states and actions must be arrays of vectors")
            trajectories.append(traj)
    norm = None
    sidecar = stats_path_for(path)
    if sidecar.exists():
        norm = NormStats.from_dict(json.loads(sidecar.read_text()))
    return Dataset(trajectories, norm)


def dumps_dataset(dataset):
    return "".join(json.dumps(t.to_record(), sort_keys=True) + "\n" for t in dataset)


def save_dataset(dataset, path):
    """Write JSON lines (and the stats sidecar when normalization is attached)."""
    path = Path(path)
    atomic_write_text(path, dumps_dataset(dataset))
    if dataset.norm_stats is not None:
        atomic_write_text(stats_path_for(path), json.dumps(dataset.norm_stats.to_dict(), sort_keys=True) + "\n")


@dataclass
class ReturnIndex:
    total: float
    return_to_go: np.ndarray
    gamma: float


def compute_returns(traj, gamma):
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    r = traj.rewards
    rtg = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc if t < len(r) - 1 else r[t]
        rtg[t] = acc
    return ReturnIndex(float(rtg[0]), rtg, gamma)


def fit_normalizer(dataset, floor=STD_FLOOR):
    states = dataset.all_states()
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    low = std < floor
    if np.any(low):
        warnings.warn(f"constant state dimensions {np.flatnonzero(low).tolist()}; std floored at {floor}")
        std = np.where(low, floor, std)
    return NormStats(mean, std)


def nearest_rank(sorted_values, q):
    """Value at 1-based rank ``ceil(q * n)`` (clamped to ``[1, n]``)."""
    n = len(sorted_values)
    rank = min(max(math.ceil(q * n - 1e-12), 1), n)
    return sorted_values[rank - 1]


def partition_by_return(dataset, gamma=1.0, low_quantile=0.5, high_quantile=0.8):
    """Split into the bottom ``low_quantile`` and top ``1 - high_quantile`` by return.

    Returns two lists of trajectory indices. Thresholds use nearest ranks:
    the low cut is the ``ceil(low_q * n)``-th smallest return and the high cut
    is the ``ceil((1 - high_q) * n)``-th largest, ties included on both sides.
    """
    if not (0.0 < low_quantile <= high_quantile < 1.0):
        raise ConfigError(f"need 0 < low_q <= high_q < 1, got {low_quantile}, {high_quantile}")
    returns = np.array([t.total_return(gamma) for t in dataset])
    asc = np.sort(returns)
    low_cut = nearest_rank(asc, low_quantile)
    high_cut = nearest_rank(asc[::-1], 1.0 - high_quantile)
    low = [i for i, g in enumerate(returns) if g <= low_cut]
    high = [i for i, g in enumerate(returns) if g >= high_cut]
    if asc[0] == asc[-1]:
        warnings.warn("all trajectory returns are equal; both pools hold the whole dataset")
    if not low or not high:
        raise ConfigError("return partition produced an empty pool")
    return low, high


def cut_range(T, min_keep):
    """Valid cut indices (1-based) leaving ``min_keep`` states on each side of the cut.

    The cut state belongs to both sides, so ``T >= 2 * min_keep - 1`` suffices.
    """
    if min_keep < 2:
        raise ConfigError(f"min_keep must be at least 2 (a segment needs a transition), got {min_keep}")
    lo, hi = min_keep, T - min_keep + 1
    if hi < lo:
        raise DatasetError(f"trajectory of length {T} too short for min_keep={min_keep}")
    return lo, hi


def sample_cut_segment(traj, rng, min_keep=5, mode="prefix", cut=None):
    """Cut ``traj`` at a uniformly drawn index and keep one side.

    ``mode="prefix"`` keeps steps ``1..cut`` (the cut state is the last one
    kept); ``mode="suffix"`` keeps ``cut..T`` (the cut state is the first).
    Both sides of the cut hold at least ``min_keep`` states.
    """
    lo, hi = cut_range(len(traj), min_keep)
    if cut is None:
        cut = int(rng.integers(lo, hi + 1))
    elif not lo <= cut <= hi:
        raise DatasetError(f"cut {cut} outside [{lo}, {hi}]")
    if mode == "prefix":
        seg = traj.slice(0, cut)
        return seg, seg.states[-1].copy()
    if mode == "suffix":
        seg = traj.slice(cut - 1, len(traj))
        return seg, seg.states[0].copy()
    raise ValueError(f"unknown mode {mode!r}")
