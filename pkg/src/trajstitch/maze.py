"""Open 2-D point maze with two disjoint demonstration families.

Family A leaves the start ``S`` heading east-northeast and stops well short
of family B, earning no reward. Family B starts below the goal ``G`` and
walks north into it. No raw
trajectory connects ``S`` to ``G``; only stitched ones do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Trajectory, compute_returns, fit_normalizer
from .errors import ConfigError, GenerationError
from .nn import Adam, Mlp, mse_loss


@dataclass(frozen=True)
class PointMazeSpec:
    start: tuple = (0.0, 0.0)
    goal: tuple = (3.0, 3.0)
    goal_radius: float = 0.3
    max_step: float = 0.15
    episode_cap: int = 100
    bounds: tuple = ((-0.5, 3.5), (-0.5, 3.5))

    def __post_init__(self):
        if self.goal_radius <= 0 or self.max_step <= 0:
            raise ConfigError("goal radius and max step must be positive")
        for p in (self.start, self.goal):
            if not self.in_bounds(p):
                raise ConfigError(f"{p} lies outside the arena")

    def in_bounds(self, p):
        return all(lo <= x <= hi for x, (lo, hi) in zip(p, self.bounds))

    def clip_bounds(self, p):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(p, lo, hi)


def clip_norm(v, max_norm):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v * (max_norm / n) if n > max_norm else v


def env_step(spec, state, action):
    nxt = spec.clip_bounds(np.asarray(state, dtype=np.float64) + clip_norm(action, spec.max_step))
    reached = bool(np.linalg.norm(nxt - np.asarray(spec.goal)) <= spec.goal_radius)
    return nxt, (1.0 if reached else 0.0), reached


@dataclass
class ScenarioParams:
    """Geometry of the two demonstration families."""

    a_speed: tuple = (0.06, 0.12)
    a_heading: tuple = (0.0, 1.0)
    a_heading_std: float = 0.15
    a_length: tuple = (16, 22)
    b_start_x: tuple = (2.9, 3.1)
    b_start_y: tuple = (1.5, 1.7)
    b_speed: float = 0.06
    b_heading_std: float = 0.1
    min_gap: float = 1.0


SCENARIOS = ("disjoint-families",)


def _rollout_family_a(spec, p, rng):
    T = int(rng.integers(p.a_length[0], p.a_length[1] + 1))
    mean_heading = rng.uniform(*p.a_heading)
    speed = rng.uniform(*p.a_speed)
    s = np.array(spec.start, dtype=np.float64)
    states, actions, rewards = [], [], []
    for _ in range(T):
        heading = rng.normal(mean_heading, p.a_heading_std)
        a = speed * np.array([math.cos(heading), math.sin(heading)])
        states.append(s)
        actions.append(a)
        rewards.append(0.0)
        s, _, _ = env_step(spec, s, a)
    return Trajectory(np.array(states), np.array(actions), np.array(rewards))


def _rollout_family_b(spec, p, rng):
    s = np.array([rng.uniform(*p.b_start_x), rng.uniform(*p.b_start_y)])
    states, actions, rewards = [], [], []
    for _ in range(spec.episode_cap):
        heading = math.pi / 2 + rng.normal(0.0, p.b_heading_std)
        a = p.b_speed * np.array([math.cos(heading), math.sin(heading)])
        nxt, r, done = env_step(spec, s, a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        s = nxt
        if done:
            break
    if not done:
        return None
    return Trajectory(np.array(states), np.array(actions), np.array(rewards))


def _corridor_distance(states, p):
    """Distance from each state to the box B starts in, extended north to the arena top."""
    lo = np.array([p.b_start_x[0], p.b_start_y[0]])
    hi = np.array([p.b_start_x[1], np.inf])
    gap = np.maximum(lo - states, 0.0) + np.maximum(states - hi, 0.0)
    return np.linalg.norm(gap, axis=1)


def min_family_distance(states_a, states_b):
    """Exact minimum pairwise distance, chunked to bound memory."""
    best = math.inf
    for i in range(0, len(states_a), 512):
        chunk = states_a[i : i + 512]
        d = np.linalg.norm(chunk[:, None, :] - states_b[None, :, :], axis=2)
        best = min(best, float(d.min()))
    return best


def generate_offline_dataset(spec, scenario, n_per_family, rng, params=None):
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    p = params or ScenarioParams()
    goal = np.asarray(spec.goal)
    fam_a = []
    while len(fam_a) < n_per_family:
        t = _rollout_family_a(spec, p, rng)
        # margin for the lateral drift of family B
        if np.min(_corridor_distance(t.states, p)) >= p.min_gap + 0.15:
            fam_a.append(t)
    fam_b = []
    while len(fam_b) < n_per_family:
        t = _rollout_family_b(spec, p, rng)
        if t is not None:
            fam_b.append(t)
    for t in fam_a:
        t.info = {"family": "A"}
        if np.min(np.linalg.norm(t.states - goal, axis=1)) <= spec.goal_radius:
            raise GenerationError("family A entered the goal region")
    for t in fam_b:
        t.info = {"family": "B"}
    gap = min_family_distance(np.concatenate([t.states for t in fam_a]), np.concatenate([t.states for t in fam_b]))
    if gap < p.min_gap:
        raise GenerationError(f"families are only {gap:.3f} apart (need {p.min_gap})")
    ds = Dataset(fam_a + fam_b)
    ds.norm_stats = fit_normalizer(ds)
    return ds


# mixed-ratio sampling


@dataclass(frozen=True)
class MixConfig:
    original_parts: float = 4
    augmented_parts: float = 1
    batch_size: int = 256

    def __post_init__(self):
        if self.original_parts < 0 or self.augmented_parts < 0:
            raise ConfigError("ratio parts must be nonnegative")
        if self.original_parts == 0 and self.augmented_parts == 0:
            raise ConfigError("ratio parts cannot both be zero")

    @classmethod
    def parse(cls, text, batch_size=256):
        o, a = text.split(":")
        return cls(float(o), float(a), batch_size)

    def counts(self):
        n_orig = math.floor(self.batch_size * self.original_parts / (self.original_parts + self.augmented_parts) + 0.5)
        return n_orig, self.batch_size - n_orig

    @property
    def label(self):
        return f"{self.original_parts:g}:{self.augmented_parts:g}"


@dataclass
class TransitionPool:
    states: np.ndarray
    actions: np.ndarray
    source: np.ndarray = field(default=None)

    @classmethod
    def from_trajectories(cls, trajs, d_s=2, d_a=2):
        if not trajs:
            return cls(np.zeros((0, d_s)), np.zeros((0, d_a)))
        return cls(np.concatenate([t.states for t in trajs]), np.concatenate([t.actions for t in trajs]))

    def __len__(self):
        return len(self.states)


def mixed_batch_sampler(original, augmented, mix, rng):
    """Draw a shuffled batch with the ratio's original/augmented split.

    Returns ``(states, actions, is_augmented)``.
    """
    n_o, n_a = mix.counts()
    if n_o and len(original) == 0:
        raise ConfigError("original pool is empty but the ratio asks for original data")
    if n_a and len(augmented) == 0:
        raise ConfigError("augmented pool is empty but the ratio asks for augmented data")
    io = rng.integers(0, max(len(original), 1), size=n_o)
    ia = rng.integers(0, max(len(augmented), 1), size=n_a)
    s = np.concatenate([original.states[io], augmented.states[ia]])
    a = np.concatenate([original.actions[io], augmented.actions[ia]])
    flag = np.concatenate([np.zeros(n_o, bool), np.ones(n_a, bool)])
    perm = rng.permutation(len(flag))
    return s[perm], a[perm], flag[perm]


# percentile behavior cloning


@dataclass
class BCConfig:
    percentile: float = 0.2
    hidden: tuple = (128, 128)
    steps: int = 3000
    lr: float = 1e-3
    tie_tol: float = 1e-2


@dataclass
class PolicyModel:
    mlp: Mlp
    norm: object
    max_step: float
    percentile: float

    def act(self, state):
        a = self.mlp.forward(self.norm.normalize(state))
        return clip_norm(a, self.max_step)


def elite_trajectories(trajectories, percentile, tie_tol=0.0):
    """Trajectories whose undiscounted return reaches the top-``percentile`` cut.

    Returns within ``tie_tol`` of the cut count as ties and are kept, so
    reward-model noise on stitched data does not outrank real trajectories
    with the same true return.
    """
    if not 0 < percentile <= 1:
        raise ConfigError(f"percentile must lie in (0, 1], got {percentile}")
    returns = np.array([t.total_return(1.0) for t in trajectories])
    desc = np.sort(returns)[::-1]
    rank = min(max(math.ceil(percentile * len(desc) - 1e-12), 1), len(desc))
    cut = desc[rank - 1]
    return [t for t, g in zip(trajectories, returns) if g >= cut - tie_tol]


def train_percentile_bc(original, augmented, mix, config, spec, norm, rng):
    """Behavior cloning on the top-return slice of ``original + augmented``."""
    pool = list(original) + list(augmented)
    elite = elite_trajectories(pool, config.percentile, config.tie_tol)
    if not elite:
        raise ConfigError("top-percentile pool is empty")
    elite_ids = {id(t) for t in elite}
    d_s, d_a = original[0].state_dim, original[0].action_dim
    orig_pool = TransitionPool.from_trajectories([t for t in original if id(t) in elite_ids], d_s, d_a)
    aug_pool = TransitionPool.from_trajectories([t for t in augmented if id(t) in elite_ids], d_s, d_a)
    n_o, n_a = mix.counts()
    for need, pool_, side in ((n_o, orig_pool, "original"), (n_a, aug_pool, "augmented")):
        if need and len(pool_) == 0:
            raise ConfigError(
                f"no {side} trajectory reaches the top-{config.percentile:g} return cut, "
                f"but ratio {mix.label} asks for {side} data"
            )
    mlp = Mlp([d_s, *config.hidden, d_a], rng=rng)
    opt = Adam(lr=config.lr)
    for _ in range(config.steps):
        s, a, _ = mixed_batch_sampler(orig_pool, aug_pool, mix, rng)
        pred, cache = mlp.forward(norm.normalize(s), return_cache=True)
        _, g = mse_loss(pred, a)
        grads, _ = mlp.backward(cache, g)
        opt.step(mlp, grads)
    policy = PolicyModel(mlp, norm, spec.max_step, config.percentile)
    policy.elite_counts = (len(orig_pool), len(aug_pool))
    return policy


def evaluate_policy(spec, policy, episodes=1, gamma=0.99):
    """Success rate and mean discounted return of rollouts from the start state.

    ``policy`` is any callable ``state -> action`` or an object with ``act``.
    """
    if episodes < 1:
        raise ConfigError("need at least one episode")
    act = policy.act if hasattr(policy, "act") else policy
    successes, returns = 0, []
    for _ in range(episodes):
        s = np.array(spec.start, dtype=np.float64)
        ret, disc = 0.0, 1.0
        for _ in range(spec.episode_cap):
            s, r, done = env_step(spec, s, act(s))
            ret += disc * r
            disc *= gamma
            if done:
                successes += 1
                break
        returns.append(ret)
    return successes / episodes, float(np.mean(returns))


def oracle_policy(spec):
    goal = np.asarray(spec.goal)
    return lambda s: clip_norm(goal - s, spec.max_step)


def return_improvement_report(dataset, augmented, gamma=0.99):
    """Compare prefix-state return-to-go before and after stitching.

    Returns ``(fraction_improved, pairs)`` with ``pairs`` an ``(n, 2)`` array
    of (before, after); ``fraction_improved`` is ``None`` when there is no data.
    """
    pairs = []
    for t in augmented:
        info = t.info
        if "low_index" not in info:
            continue
        original = dataset[info["low_index"]]
        before = compute_returns(original, gamma).return_to_go[: info["prefix_len"]]
        after = compute_returns(t, gamma).return_to_go[: info["prefix_len"]]
        pairs.extend(zip(before, after))
    if not pairs:
        return None, np.zeros((0, 2))
    pairs = np.array(pairs)
    return float(np.mean(pairs[:, 1] > pairs[:, 0])), pairs
