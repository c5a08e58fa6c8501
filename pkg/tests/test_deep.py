import numpy as np
import pytest

from mevrl import deep as dp
from mevrl.envs import TERMINAL, CliffWalk, DiscreteEnv, MaxBiasMDP, StepResult
from mevrl.kernels import GaussianCdf, IndicatorAlpha


def _optimal_q(env, gamma, sweeps=500):
    q = np.zeros((env.n_states, env.max_actions))
    for _ in range(sweeps):
        v = q.max(axis=1)
        new = np.zeros_like(q)
        for s in range(env.n_states):
            for a in range(4):
                r = env.step(s, a)
                new[s, a] = r.reward + (0.0 if r.done else gamma * v[r.next_state])
        q = new
    return q


def test_targets_by_hand():
    qt = np.array([[[1.0, 5.0], [2.0, 0.0]]])  # (B=1, K=2, A=2)
    qm = np.array([[[9.0, 0.0], [0.0, 9.0]]])
    y = dp.bdqn_targets([1.0], [False], qt, variant="dqn", gamma=0.5)
    assert np.allclose(y, [[1 + 2.5, 1 + 1.0]])
    y = dp.bdqn_targets([1.0], [False], qt, qm, variant="bdqn", gamma=0.5)
    assert np.allclose(y, [[1 + 0.5, 1 + 0.0]])
    y = dp.bdqn_targets([1.0], [True], qt, qm, variant="ddqn", gamma=0.5)
    assert np.allclose(y, 1.0)
    with pytest.raises(ValueError):
        dp.bdqn_targets([1.0], [False], qt, variant="te-bdqn")


def test_te_half_targets_equal_per_head_max():
    rng = np.random.default_rng(0)
    qt = rng.normal(size=(16, 5, 4))
    a = dp.bdqn_targets(np.zeros(16), np.zeros(16, bool), qt, variant="te-bdqn",
                        kernel=IndicatorAlpha(0.5))
    b = dp.bdqn_targets(np.zeros(16), np.zeros(16, bool), qt, variant="dqn")
    assert np.array_equal(a, b)


def test_te_targets_lie_between_average_and_max():
    rng = np.random.default_rng(1)
    qt = rng.normal(size=(16, 5, 4))
    y = dp.bdqn_targets(np.zeros(16), np.zeros(16, bool), qt, variant="ke-bdqn",
                        kernel=GaussianCdf(1.0), gamma=1.0)
    assert np.all(y <= qt.max(-1) + 1e-12) and np.all(y >= qt.mean(-1) - 1e-12)


def test_head_variance():
    q = np.random.default_rng(2).normal(size=(3, 6, 2))
    assert np.allclose(dp.head_variance(q), q.var(axis=1, ddof=1))
    assert np.allclose(dp.head_variance(q, over_k=True), q.var(axis=1, ddof=1) / 6)
    with pytest.raises(ValueError):
        dp.head_variance(q[:, :1])


def test_masked_td_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 3, 2))
    a = rng.integers(0, 2, 4)
    y = rng.normal(size=(4, 3))
    m = (rng.random((4, 3)) < 0.6).astype(float)
    grad, loss = dp.masked_td_gradient(q, a, y, m)

    def f(qq):
        return float((m * (y - qq[np.arange(4), :, a]) ** 2).sum() / 4)

    assert loss == pytest.approx(f(q))
    num = np.zeros_like(q)
    for i in np.ndindex(q.shape):
        up, dn = q.copy(), q.copy()
        up[i] += 1e-6
        dn[i] -= 1e-6
        num[i] = (f(up) - f(dn)) / 2e-6
    assert np.allclose(grad, num, atol=1e-6)


def test_ada_state_clamps():
    st = dp.AdaState(alpha=0.25, tau=1.0)
    assert st.apply(1e6, 10) == 0.5
    assert st.apply(-1e6, 10) == 0.01
    st = dp.AdaState(alpha=0.25, tau=1e-4)
    assert st.apply(100.0, 10) == pytest.approx(0.251)


def test_replay_buffer_wraps_and_samples():
    buf = dp.ReplayBuffer(3, heads=2)
    with pytest.raises(dp.BufferEmpty):
        buf.sample(1, np.random.default_rng(0))
    for i in range(5):
        buf.add(i, 0, float(i), i + 1, False, np.ones(2))
    assert len(buf) == 3 and sorted(buf.states.tolist()) == [2, 3, 4]
    idx = buf.sample(1000, np.random.default_rng(0))
    assert set(idx.tolist()) == {0, 1, 2}


def test_n_step_return_by_hand():
    env = CliffWalk()
    q = np.zeros((env.n_states, 4))
    q[:, env.UP] = 1.0
    q[env.width * (env.height - 1):, env.UP] = -5.0
    q[env.width * (env.height - 1):, env.LEFT] = 2.0
    out = dp.n_step_return(env, q, 0, 2, 0.5)
    # two steps up, then bootstrap with max Q at row 2 (=1)
    assert [(s, a) for s, a, _ in out] == [(0, env.UP), (env.width, env.UP)]
    assert out[1][2] == pytest.approx(-1 + 0.5 * 1.0)
    assert out[0][2] == pytest.approx(-1 + 0.5 * out[1][2])


def test_optimal_q_has_zero_bias_and_crosses_in_eleven():
    env = CliffWalk()
    q = _optimal_q(env, 0.99)
    assert q[0].max() == pytest.approx(-sum(0.99 ** k for k in range(11)))
    rng = np.random.default_rng(4)
    assert dp.estimate_bias([q], env, 20, 0.99, 200, rng) == pytest.approx(0.0, abs=1e-9)
    assert dp.estimate_bias([q + 1.0], env, 5, 0.99, 200, rng) == pytest.approx(1.0)


def test_bias_needs_tuples():
    with pytest.raises(ValueError):
        dp.estimate_bias([], CliffWalk(), 1, 0.99)


def test_majority_vote_ties_to_lowest():
    q = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert dp.majority_action(q) == 0
    q = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0]])
    assert dp.majority_action(q) == 1


def test_config_validation():
    with pytest.raises(ValueError, match=r"alpha must lie in \(0, 0.5\]"):
        dp.DeepConfig("te-bdqn", alpha=0.9)
    with pytest.raises(ValueError):
        dp.DeepConfig("ke-bdqn")
    with pytest.raises(ValueError):
        dp.DeepConfig("bdqn", heads=1)
    assert dp.DeepConfig("dqn").n_heads == 1


def test_agent_targets_match_direct_formula():
    env = CliffWalk()
    cfg = dp.DeepConfig("te-bdqn", alpha=0.1, heads=4, hidden=8)
    agent = dp.Agent(env, cfg, np.random.default_rng(5))
    nxt = np.array([0, 11, 25])
    y = agent.targets(np.array([-1.0, -1.0, -1.0]), np.array([False, False, True]), nxt)
    qt = agent.target(env.encode_batch(nxt))
    ref = dp.bdqn_targets([-1.0] * 3, [False, False, True], qt, variant="te-bdqn",
                          kernel=IndicatorAlpha(0.1), gamma=cfg.gamma)
    assert np.allclose(y, ref)


@pytest.mark.parametrize("variant", dp.VARIANTS)
def test_short_training_runs(variant):
    cfg = dp.DeepConfig(variant, alpha=0.2, kernel=GaussianCdf(1.0), heads=3, hidden=16,
                        total_steps=600, min_buffer=100, target_period=100, eval_every=300,
                        eval_episodes=2, eval_max_steps=50, bias_max_steps=50, t_ada=4)
    log = dp.train_deep(MaxBiasMDP(), cfg, seed=1)
    assert log.steps == [300, 600]
    assert all(np.isfinite(log.bias)) and all(np.isfinite(log.loss))
    if variant == "ada-te-bdqn":
        assert len(log.alpha_trace) == 6
        assert all(0.01 <= a <= 0.5 for a in log.alpha_trace)


def test_training_is_seeded():
    cfg = dp.DeepConfig("bdqn", heads=3, hidden=8, total_steps=300, min_buffer=50,
                        target_period=50, eval_every=300, eval_episodes=1)
    a = dp.train_deep(CliffWalk(), cfg, seed=7)
    b = dp.train_deep(CliffWalk(), cfg, seed=7)
    assert a.bias == b.bias and a.loss == b.loss


class _Chain(DiscreteEnv):
    """States 0 -> 1 -> 2 -> end, one action, reward 1 each step."""

    n_states = 3
    max_actions = 1

    def action_count(self, state):
        return 1

    def step(self, state, action, rng=None):
        self._check_state(state)
        done = state == 2
        return StepResult(TERMINAL if done else state + 1, 1.0, done)


def test_zero_discount_targets_are_rewards():
    qt = np.random.default_rng(0).normal(size=(5, 4, 3))
    r = np.arange(5.0)
    for variant, kw in [("dqn", {}), ("bdqn", {"q_next_main": qt}),
                        ("te-bdqn", {"kernel": IndicatorAlpha(0.1)})]:
        y = dp.bdqn_targets(r, np.zeros(5, bool), qt, variant=variant, gamma=0.0, **kw)
        assert np.array_equal(y, np.repeat(r[:, None], 4, axis=1))


def test_identical_heads_give_max_target():
    one = np.random.default_rng(1).normal(size=(6, 1, 3))
    qt = np.repeat(one, 4, axis=1)
    y = dp.bdqn_targets(np.zeros(6), np.zeros(6, bool), qt, variant="te-bdqn",
                        kernel=IndicatorAlpha(0.05), gamma=1.0)
    assert np.allclose(y, qt.max(-1))


def test_te_target_never_exceeds_me_target():
    rng = np.random.default_rng(2)
    for _ in range(20):
        qt = rng.normal(size=(8, 5, 4)) * rng.uniform(0.1, 5)
        y = dp.bdqn_targets(np.zeros(8), np.zeros(8, bool), qt, variant="te-bdqn",
                            kernel=IndicatorAlpha(rng.uniform(0.01, 0.5)), gamma=1.0)
        assert np.all(y <= qt.max(-1) + 1e-12)


def _agent_with_buffer(masks, heads=3):
    env = CliffWalk()
    agent = dp.Agent(env, dp.DeepConfig("bdqn", heads=heads, hidden=8, batch_size=4),
                     np.random.default_rng(0))
    buf = dp.ReplayBuffer(10, heads)
    for i in range(4):
        buf.add(10 + i, 0, -1.0, 20 + i, False, masks)
    return agent, buf


def test_all_zero_masks_leave_parameters_unchanged():
    agent, buf = _agent_with_buffer(np.zeros(3))
    before = agent.net.flat()
    agent.train_step(buf, np.random.default_rng(1))
    assert np.array_equal(agent.net.theta, before)


def test_idle_head_is_untouched_while_trunk_moves():
    agent, buf = _agent_with_buffer(np.array([1.0, 0.0, 1.0]))
    rng = np.random.default_rng(1)
    agent.train_step(buf, rng)
    buf.masks[:4] = [0.0, 0.0, 1.0]
    w1, b1 = agent.net.head_w[1].copy(), agent.net.head_b[1].copy()
    trunk = agent.net.trunk.weights[0].copy()
    agent.train_step(buf, rng)
    assert np.array_equal(agent.net.head_w[1], w1) and np.array_equal(agent.net.head_b[1], b1)
    assert not np.array_equal(agent.net.trunk.weights[0], trunk)


def test_single_tuple_overfit():
    env = CliffWalk()
    agent = dp.Agent(env, dp.DeepConfig("dqn", hidden=16, batch_size=1),
                     np.random.default_rng(3))
    buf = dp.ReplayBuffer(1, 1)
    buf.add(12, 2, -1.0, 0, True, np.ones(1))
    for _ in range(500):
        loss = agent.train_step(buf, np.random.default_rng(0))
    assert loss < 1e-6


def test_target_equals_main_after_sync():
    agent, buf = _agent_with_buffer(np.ones(3))
    agent.train_step(buf, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, agent.env.n_states))
    assert not np.array_equal(agent.target(x), agent.net(x))
    agent.sync()
    assert np.array_equal(agent.target(x), agent.net(x))


def test_n_step_examples():
    chain = _Chain()
    q = np.zeros((3, 1))
    assert [r for *_, r in dp.n_step_return(chain, q, 0, 10, 1.0)] == [3.0, 2.0, 1.0]
    zero = MaxBiasMDP(reward_mean=0.0, reward_sd=0.0)
    qz = np.zeros((2, 8))
    assert all(r == 0 for *_, r in dp.n_step_return(zero, qz, 0, 10, 0.99))
    q1 = np.array([[0.0], [5.0], [0.0]])
    out = dp.n_step_return(chain, q1, 0, 1, 0.99)
    assert out == [(0, 0, pytest.approx(1.0 + 0.99 * 5.0))]
    with pytest.raises(TypeError):
        dp.n_step_return(object(), q, 0, 1, 1.0)


def test_ada_update_direction():
    chain = _Chain()
    buf = dp.ReplayBuffer(5, 1)
    buf.add(0, 0, 1.0, 1, False, np.ones(1))
    exact = np.array([[3.0], [2.0], [1.0]])
    st = dp.AdaState(alpha=0.25, tau=0.01, horizon=10)
    assert dp.ada_alpha_update(st, [exact], chain, buf, 1.0, np.random.default_rng(0)) == 0.25
    assert dp.ada_alpha_update(st, [exact + 1.0], chain, buf, 1.0,
                               np.random.default_rng(0)) < 0.25
    empty = dp.ReplayBuffer(5, 1)
    assert dp.ada_alpha_update(st, [exact], chain, empty, 1.0, None) == st.alpha
