import numpy as np
import pytest

from trajstitch.data import Dataset, Trajectory, compute_returns, fit_normalizer
from trajstitch.errors import ConfigError, GenerationError
from trajstitch import maze
from trajstitch.maze import (
    BCConfig,
    MixConfig,
    PointMazeSpec,
    ScenarioParams,
    TransitionPool,
    clip_norm,
    elite_trajectories,
    env_step,
    evaluate_policy,
    generate_offline_dataset,
    min_family_distance,
    mixed_batch_sampler,
    oracle_policy,
    return_improvement_report,
    train_percentile_bc,
)

SPEC = PointMazeSpec()


def test_env_step_examples():
    s, r, done = env_step(SPEC, SPEC.goal, [0.05, -0.05])
    assert r == 1.0 and done
    s, r, done = env_step(SPEC, [0.5, 0.5], [0.0, 0.0])
    assert s.tolist() == [0.5, 0.5] and r == 0.0 and not done
    spec = PointMazeSpec(max_step=0.1)
    s, _, _ = env_step(spec, [1.0, 1.0], [6.0, 8.0])
    assert np.linalg.norm(s - 1.0) == pytest.approx(0.1, abs=1e-15)
    s, _, _ = env_step(SPEC, [3.45, 0.0], [0.15, 0.0])
    assert s[0] == 3.5


def test_spec_validation():
    with pytest.raises(ConfigError):
        PointMazeSpec(goal=(9.0, 9.0))
    with pytest.raises(ConfigError):
        PointMazeSpec(goal_radius=0.0)


@pytest.fixture(scope="module")
def dataset():
    return generate_offline_dataset(SPEC, "disjoint-families", 50, np.random.default_rng(0))


def test_dataset_families(dataset):
    assert len(dataset) == 100
    fams = [t.info["family"] for t in dataset]
    assert fams.count("A") == 50 and fams.count("B") == 50
    for t in dataset:
        g = t.total_return(0.99)
        if t.info["family"] == "A":
            assert g == 0.0
        else:
            assert g >= 0.99 ** len(t) and g > 0


def test_dataset_gap_brute_force(dataset):
    a = [s for t in dataset if t.info["family"] == "A" for s in t.states]
    b = [s for t in dataset if t.info["family"] == "B" for s in t.states]
    best = min(float(np.hypot(*(p - q))) for p in a for q in b)
    assert best >= 1.0
    assert min_family_distance(np.array(a), np.array(b)) == pytest.approx(best, abs=1e-12)


def test_family_a_avoids_goal(dataset):
    goal = np.array(SPEC.goal)
    for t in dataset:
        if t.info["family"] == "A":
            assert np.linalg.norm(t.states - goal, axis=1).min() > SPEC.goal_radius


def test_generation_deterministic():
    a = generate_offline_dataset(SPEC, "disjoint-families", 5, np.random.default_rng(3))
    b = generate_offline_dataset(SPEC, "disjoint-families", 5, np.random.default_rng(3))
    for x, y in zip(a, b):
        assert x.states.tobytes() == y.states.tobytes()


def test_generation_errors(monkeypatch):
    with pytest.raises(ConfigError):
        generate_offline_dataset(SPEC, "overlapping", 5, np.random.default_rng(0))
    # disable the family-A filter so some rollouts drift close to family B
    monkeypatch.setattr(maze, "_corridor_distance", lambda states, p: np.full(len(states), np.inf))
    with pytest.raises(GenerationError, match="apart"):
        generate_offline_dataset(SPEC, "disjoint-families", 50, np.random.default_rng(0), ScenarioParams(a_speed=(0.12, 0.12), a_length=(22, 22)))


# mixing


def pools():
    o = TransitionPool(np.zeros((10, 2)), np.zeros((10, 2)))
    a = TransitionPool(np.ones((4, 2)), np.ones((4, 2)))
    return o, a


def test_mix_counts():
    assert MixConfig(4, 1, 256).counts() == (205, 51)
    assert MixConfig(1, 0, 256).counts() == (256, 0)
    assert MixConfig(0, 1, 256).counts() == (0, 256)
    assert MixConfig(1, 2, 256).counts() == (85, 171)
    assert MixConfig.parse("2:1").label == "2:1"


def test_mixed_batch_contents():
    o, a = pools()
    rng = np.random.default_rng(0)
    s, _, flag = mixed_batch_sampler(o, a, MixConfig(4, 1, 256), rng)
    assert flag.sum() == 51 and len(s) == 256
    assert np.all(s[flag] == 1) and np.all(s[~flag] == 0)
    assert not np.all(flag[:51])  # shuffled
    s, _, flag = mixed_batch_sampler(o, TransitionPool.from_trajectories([]), MixConfig(1, 0, 64), rng)
    assert not flag.any()
    s, _, flag = mixed_batch_sampler(TransitionPool.from_trajectories([]), a, MixConfig(0, 1, 64), rng)
    assert flag.all()


def test_mixed_batch_empty_pool_errors():
    o, a = pools()
    empty = TransitionPool.from_trajectories([])
    with pytest.raises(ConfigError):
        mixed_batch_sampler(o, empty, MixConfig(4, 1, 32), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mixed_batch_sampler(empty, a, MixConfig(4, 1, 32), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        MixConfig(0, 0)


# percentile behavior cloning


def traj(ret, n=3):
    r = np.zeros(n)
    r[-1] = ret
    return Trajectory(np.zeros((n, 2)), np.zeros((n, 2)), r)


def test_elite_selection():
    ts = [traj(g) for g in (0.0, 0.0, 1.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)]
    assert elite_trajectories(ts, 1.0) == ts
    top = elite_trajectories(ts, 0.1)
    assert len(top) == 2 and all(t.rewards[-1] == 1.0 for t in top)  # tie kept
    assert len(elite_trajectories(ts, 0.3)) == 3
    with pytest.raises(ConfigError):
        elite_trajectories(ts, 0.0)


def test_elite_only_goal_reaching(dataset):
    aug = [traj(1.0, 30) for _ in range(5)]
    for t in aug:
        t.source = "augmented"
    top = elite_trajectories(list(dataset) + aug, 0.1)
    assert all(t.source == "augmented" or t.info.get("family") == "B" for t in top)


def test_bc_learns_oracle_like_policy():
    rng = np.random.default_rng(1)
    demos = []
    for _ in range(20):
        s = rng.uniform(-0.3, 0.3, 2)
        states, actions, rewards = [], [], []
        for _ in range(60):
            a = clip_norm(np.array(SPEC.goal) - s, SPEC.max_step)
            nxt, r, done = env_step(SPEC, s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            s = nxt
            if done:
                break
        demos.append(Trajectory(np.array(states), np.array(actions), np.array(rewards)))
    norm = fit_normalizer(Dataset(demos))
    policy = train_percentile_bc(demos, [], MixConfig(1, 0, 64), BCConfig(percentile=1.0, hidden=(32, 32), steps=800, lr=3e-3), SPEC, norm, rng)
    assert policy.elite_counts == (sum(len(t) for t in demos), 0)
    assert evaluate_policy(SPEC, policy)[0] == 1.0
    assert np.linalg.norm(policy.act(np.array([0.1, 0.2]))) <= SPEC.max_step + 1e-12


# evaluation


def test_oracle_and_zero_policy():
    succ, ret = evaluate_policy(SPEC, oracle_policy(SPEC), episodes=2)
    assert succ == 1.0 and 0 < ret <= 1.0
    succ, ret = evaluate_policy(SPEC, lambda s: np.zeros(2))
    assert succ == 0.0 and ret == 0.0
    with pytest.raises(ConfigError):
        evaluate_policy(SPEC, lambda s: np.zeros(2), episodes=0)


def test_evaluation_bounds():
    rng = np.random.default_rng(5)
    for _ in range(5):
        w = rng.normal(size=(2, 2))
        succ, ret = evaluate_policy(SPEC, lambda s, w=w: clip_norm(w @ (np.array(SPEC.goal) - s), SPEC.max_step), gamma=1.0)
        assert 0.0 <= succ <= 1.0 and ret <= 1.0


# return improvement


def test_improvement_zero_to_positive():
    low = traj(0.0, 6)
    gen = traj(1.0, 12)
    gen.info = {"low_index": 0, "prefix_len": 5}
    frac, pairs = return_improvement_report([low], [gen], 0.99)
    assert frac == 1.0 and pairs.shape == (5, 2)
    np.testing.assert_array_equal(pairs[:, 0], 0.0)
    np.testing.assert_allclose(pairs[:, 1], compute_returns(gen, 0.99).return_to_go[:5])


def test_improvement_no_data():
    frac, pairs = return_improvement_report([traj(0.0)], [], 0.99)
    assert frac is None and pairs.shape == (0, 2)


def test_elite_tie_tolerance():
    real = traj(1.0)
    noisy = [traj(1.0002) for _ in range(4)]
    strict = elite_trajectories([real] + noisy, 0.2)
    assert all(t is not real for t in strict)
    loose = elite_trajectories([real] + noisy, 0.2, tie_tol=1e-2)
    assert any(t is real for t in loose) and len(loose) == 5
    assert len(elite_trajectories([traj(0.0), traj(1.0)], 0.5, tie_tol=1e-2)) == 1


def test_bc_empty_elite_side_errors():
    norm = fit_normalizer(Dataset([traj(0.0)]))
    aug = [traj(1.0)]
    with pytest.raises(ConfigError, match="no original trajectory"):
        train_percentile_bc([traj(0.0)] * 4, aug, MixConfig(4, 1, 8), BCConfig(percentile=0.2, hidden=(4,), steps=1), SPEC, norm, np.random.default_rng(0))
    policy = train_percentile_bc([traj(0.0)] * 4, aug, MixConfig(0, 1, 8), BCConfig(percentile=0.2, hidden=(4,), steps=1), SPEC, norm, np.random.default_rng(0))
    assert policy.elite_counts == (0, 3)
