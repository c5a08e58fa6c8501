import numpy as np
import pytest

from mevrl.envs import TERMINAL, CliffWalk, EnvError, MaxBiasMDP, make_env


def test_maxbias_transitions():
    env = MaxBiasMDP()
    rng = np.random.default_rng(0)
    assert env.reset() == env.A
    r = env.step(env.A, env.LEFT, rng)
    assert (r.next_state, r.reward, r.done) == (env.B, 0.0, False)
    r = env.step(env.A, env.RIGHT, rng)
    assert (r.next_state, r.reward, r.done) == (TERMINAL, 0.0, True)
    assert env.action_count(env.A) == 2 and env.action_count(env.B) == 8
    assert env.action_mask().sum(axis=1).tolist() == [2, 8]


def test_maxbias_reward_distribution():
    env = MaxBiasMDP()
    rng = np.random.default_rng(1)
    _, rewards, done = env.step_batch(np.ones(200_000, int), np.zeros(200_000, int), rng)
    assert done.all()
    assert rewards.mean() == pytest.approx(-0.1, abs=0.01)
    assert rewards.std() == pytest.approx(1.0, abs=0.01)


def test_invalid_actions_and_states():
    env = MaxBiasMDP()
    rng = np.random.default_rng(0)
    with pytest.raises(EnvError):
        env.step(env.A, 2, rng)
    with pytest.raises(EnvError):
        env.step(TERMINAL, 0, rng)
    with pytest.raises(EnvError):
        CliffWalk().step(50, 0)
    with pytest.raises(EnvError):
        make_env("pong")


def test_cliff_optimal_path_is_eleven_steps():
    env = CliffWalk()
    s, total = env.reset(), 0.0
    for a in [env.UP] + [env.RIGHT] * 9 + [env.DOWN]:
        r = env.step(s, a)
        s, total = r.next_state, total + r.reward
    assert r.done and s == TERMINAL and total == -11.0


def test_cliff_fall_and_walls():
    env = CliffWalk()
    r = env.step(env.start_state, env.RIGHT)
    assert (r.next_state, r.reward, r.done) == (env.start_state, -100.0, False)
    assert env.step(0, env.LEFT).next_state == 0
    assert env.step(0, env.DOWN).next_state == 0
    top_right = env.n_states - 1
    assert env.step(top_right, env.UP).next_state == top_right
    assert env.step(top_right, env.RIGHT).next_state == top_right


def test_cliff_batch_matches_scalar():
    env = CliffWalk()
    states = np.array([s for s in range(env.n_states) for _ in range(4)])
    actions = np.tile(np.arange(4), env.n_states)
    nxt, rew, done = env.step_batch(states, actions)
    for s, a, n, r, d in zip(states, actions, nxt, rew, done):
        ref = env.step(int(s), int(a))
        assert (ref.next_state, ref.reward, ref.done) == (n, r, d)


def test_cliff_random_state_excludes_cliff_and_goal():
    env = CliffWalk()
    rng = np.random.default_rng(2)
    seen = {env.random_state(rng) for _ in range(5000)}
    assert seen == set(range(env.n_states)) - set(range(1, env.width))


def test_encoding():
    env = CliffWalk()
    x = env.encode(13)
    assert x.sum() == 1 and x[13] == 1
    batch = env.encode_batch([0, TERMINAL, 5])
    assert batch.sum(axis=1).tolist() == [1, 0, 1]
