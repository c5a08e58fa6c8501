"""Deep Q-learning on the toy environments: DQN, DDQN, BDQN, TE/KE-BDQN, Ada-TE-BDQN.

The environments are discrete with one-hot features, so greedy rollouts
(evaluation, bias estimation, adaptive-alpha roll-outs) evaluate the network
once on every state and then act from the resulting ``(S, K, A)`` table.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .envs import DiscreteEnv, TERMINAL
from .kernels import IndicatorAlpha, KernelSpec
from .nn import Adam, EnsembleNet

VARIANTS = ("dqn", "ddqn", "bdqn", "te-bdqn", "ke-bdqn", "ada-te-bdqn")


class BufferEmpty(RuntimeError):
    pass


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, s', done, mask)`` with states stored as indices."""

    def __init__(self, capacity: int, heads: int):
        self.capacity = int(capacity)
        self.states = np.zeros(self.capacity, dtype=np.int64)
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros(self.capacity, dtype=np.int64)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self.masks = np.zeros((self.capacity, heads))
        self.size = 0
        self._pos = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done, mask):
        i = self._pos
        self.states[i], self.actions[i], self.rewards[i] = s, a, r
        self.next_states[i], self.dones[i], self.masks[i] = s2, done, mask
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        """Uniform draw with replacement; returns index arrays into the buffer."""
        if self.size == 0:
            raise BufferEmpty("replay buffer is empty")
        return rng.integers(0, self.size, size=batch)

    def random_state(self, rng) -> int:
        if self.size == 0:
            raise BufferEmpty("replay buffer is empty")
        return int(self.states[rng.integers(self.size)])


@dataclass(frozen=True)
class DeepConfig:
    variant: str = "te-bdqn"
    alpha: float = 0.25
    kernel: KernelSpec | None = None
    heads: int = 10
    hidden: int = 64
    batch_size: int = 32
    gamma: float = 0.99
    target_period: int = 1000
    buffer_size: int = 100_000
    min_buffer: int = 5000
    mask_prob: float = 1.0
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_steps: int = 100_000
    test_eps: float = 0.0
    total_steps: int = 200_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    eval_max_steps: int = 200
    bias_episodes: int | None = None
    bias_max_steps: int = 200
    max_episode_steps: int = 500
    tau_ada: float = 1e-4
    t_ada: int = 32
    alpha_min: float = 0.01
    alpha_max: float = 0.5
    head_var_over_k: bool = False
    random_warmup: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant in ("te-bdqn", "ada-te-bdqn") and not (0.0 < self.alpha <= 0.5):
            raise ValueError("alpha must lie in (0, 0.5]")
        if self.variant == "ke-bdqn" and self.kernel is None:
            raise ValueError("ke-bdqn needs a kernel")
        if self.ensemble and self.heads < 2:
            raise ValueError("ensemble variants need K >= 2 heads")
        if not (0.0 < self.mask_prob <= 1.0):
            raise ValueError("mask probability must lie in (0, 1]")

    @property
    def ensemble(self) -> bool:
        return self.variant not in ("dqn", "ddqn")

    @property
    def n_heads(self) -> int:
        return self.heads if self.ensemble else 1

    @property
    def bias_episodes_per_head(self) -> int:
        if self.bias_episodes is not None:
            return self.bias_episodes
        return 3 if self.ensemble else 10


@dataclass
class AdaState:
    alpha: float = 0.25
    tau: float = 1e-4
    horizon: int = 32
    lo: float = 0.01
    hi: float = 0.5

    def apply(self, residual_sum: float, heads: int) -> float:
        self.alpha = float(np.clip(self.alpha + self.tau / heads * residual_sum, self.lo, self.hi))
        return self.alpha


# ---------------------------------------------------------------------------
# targets and training step
# ---------------------------------------------------------------------------

def head_variance(q_target, over_k: bool = False):
    """Unbiased variance across heads, shape ``(B, A)``; optionally divided by K."""
    k = q_target.shape[1]
    if k < 2:
        raise ValueError("cross-head variance needs at least two heads")
    var = q_target.var(axis=1, ddof=1)
    return var / k if over_k else var


def bdqn_targets(rewards, dones, q_next_target, q_next_main=None, variant: str = "bdqn",
                 gamma: float = 0.99, kernel: KernelSpec | None = None, over_k: bool = False):
    """Per-head TD targets of shape ``(B, K)``.

    ``q_next_*`` have shape ``(B, K, A)``.  ``dqn`` maximises the target
    head, ``ddqn``/``bdqn`` select on the main head and evaluate on the
    target head, ``te``/``ke`` weight the target-head values by the kernel of
    their test statistics against the head's champion.
    """
    rewards = np.asarray(rewards, dtype=float)[:, None]
    live = (~np.asarray(dones, dtype=bool))[:, None]
    if variant == "dqn":
        boot = q_next_target.max(axis=-1)
    elif variant in ("ddqn", "bdqn"):
        pick = q_next_main.argmax(axis=-1)[..., None]
        boot = np.take_along_axis(q_next_target, pick, axis=-1)[..., 0]
    elif variant in ("te", "ke", "te-bdqn", "ke-bdqn", "ada-te-bdqn"):
        if kernel is None:
            raise ValueError("kernel-weighted targets need a kernel")
        var = head_variance(q_next_target, over_k)[:, None, :]
        boot = est.ke_batch(q_next_target, var, 1.0, kernel)
    else:
        raise ValueError(f"unknown target variant {variant!r}")
    return rewards + gamma * np.where(live, boot, 0.0)


def masked_td_gradient(q, actions, targets, masks):
    """Gradient of ``sum_i sum_k m_ik (y_ik - Q_k(s_i, a_i))^2 / B`` w.r.t. ``q``."""
    b = q.shape[0]
    rows = np.arange(b)
    chosen = q[rows, :, actions]
    err = (chosen - targets) * masks
    grad = np.zeros_like(q)
    grad[rows, :, actions] = 2.0 * err / b
    return grad, float((err * (chosen - targets)).sum() / b)


class Agent:
    """Main and target ensembles with their optimiser.

    The target network only changes at a sync, so its bootstrap values for
    every state are tabulated once per sync (after any alpha update) and the
    training step only looks them up.
    """

    def __init__(self, env: DiscreteEnv, cfg: DeepConfig, rng: np.random.Generator):
        self.env = env
        self.cfg = cfg
        self.net = EnsembleNet(env.n_states, env.max_actions, cfg.n_heads, (cfg.hidden,), rng)
        self.target = self.net.copy()
        self.opt = Adam([self.net.theta], cfg.learning_rate)
        self.features = env.encode_batch(np.arange(env.n_states))
        self.valid = env.action_mask()
        self.ada = AdaState(cfg.alpha, cfg.tau_ada, cfg.t_ada, cfg.alpha_min, cfg.alpha_max)
        self.refresh_targets()

    @property
    def kernel(self) -> KernelSpec | None:
        if self.cfg.variant in ("te-bdqn", "ada-te-bdqn"):
            return IndicatorAlpha(self.ada.alpha)
        return self.cfg.kernel

    def _masked(self, q, states):
        return np.where(self.valid[states][:, None, :], q, -1e300)

    def table(self, net: EnsembleNet | None = None):
        """Action values of every state, ``(S, K, A)``, invalid actions at -1e300."""
        net = self.net if net is None else net
        return self._masked(net(self.features), np.arange(self.env.n_states))

    def refresh_targets(self):
        """Tabulate target-side quantities for every next state."""
        self.target_table = self.table(self.target)
        if self.cfg.variant in ("ddqn", "bdqn"):
            self.target_boot = None
        else:
            zeros = np.zeros(self.env.n_states)
            self.target_boot = bdqn_targets(zeros, zeros.astype(bool), self.target_table, None,
                                            self.cfg.variant, 1.0, self.kernel,
                                            self.cfg.head_var_over_k)

    def sync(self):
        self.target.load_from(self.net)
        self.refresh_targets()

    def targets(self, rewards, dones, next_states):
        """Per-head TD targets ``(B, K)`` for a batch."""
        if self.target_boot is not None:
            boot = self.target_boot[next_states]
        else:
            q_main = self._masked(self.net(self.features[next_states]), next_states)
            pick = q_main.argmax(axis=-1)[..., None]
            boot = np.take_along_axis(self.target_table[next_states], pick, axis=-1)[..., 0]
        live = ~np.asarray(dones, dtype=bool)
        return np.asarray(rewards, float)[:, None] + self.cfg.gamma * np.where(live[:, None],
                                                                                 boot, 0.0)

    def train_step(self, buffer: ReplayBuffer, rng) -> float:
        idx = buffer.sample(self.cfg.batch_size, rng)
        s, a = buffer.states[idx], buffer.actions[idx]
        q, cache = self.net.forward(self.features[s])
        y = self.targets(buffer.rewards[idx], buffer.dones[idx], buffer.next_states[idx])
        masks = buffer.masks[idx]
        grad_q, loss = masked_td_gradient(q, a, y, masks)
        grads = self.net.backward(cache, grad_q, trunk_scale=1.0 / self.net.heads)
        idle = np.flatnonzero(masks.sum(axis=0) == 0)
        if idle.size == self.net.heads:
            return loss
        frozen = [self.net.head_mask(idle)] if idle.size else None
        self.opt.step([self.net.theta], [self.net.flat_grad(grads)], frozen)
        return loss


# ---------------------------------------------------------------------------
# roll-outs
# ---------------------------------------------------------------------------

def _greedy_rollout(env: DiscreteEnv, q_table, start: int, steps: int, rng):
    """Greedy trajectory under ``q_table`` (S, A); returns states, actions, rewards, end state."""
    states, actions, rewards = [], [], []
    s = env.set_state(start)
    for _ in range(steps):
        a = int(np.argmax(q_table[s]))
        res = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(res.reward)
        s = TERMINAL if res.done else res.next_state
        if s == TERMINAL:
            break
    return states, actions, rewards, s


def n_step_return(env: DiscreteEnv, q_table, start_state: int, horizon: int, gamma: float,
                  rng=None):
    """Greedy roll-out of ``horizon`` steps; returns ``[(s, a, R), ...]``.

    ``R`` sums the discounted rewards to the horizon and bootstraps with
    ``max_a Q`` at the state reached, or with zero if the episode ended.
    """
    if not hasattr(env, "set_state"):
        raise TypeError("environment does not support state injection")
    rng = np.random.default_rng() if rng is None else rng
    q_table = np.asarray(q_table, dtype=float)
    states, actions, rewards, end = _greedy_rollout(env, q_table, start_state, horizon, rng)
    ret = 0.0 if end == TERMINAL else float(np.max(q_table[end]))
    out = []
    for s, a, r in zip(reversed(states), reversed(actions), reversed(rewards)):
        ret = r + gamma * ret
        out.append((s, a, ret))
    return out[::-1]


def ada_alpha_update(state: AdaState, head_tables, env: DiscreteEnv, buffer: ReplayBuffer,
                     gamma: float, rng) -> float:
    """Shift alpha by the summed n-step residuals ``R - Q`` of one roll-out per head."""
    if len(buffer) == 0:
        return state.alpha
    total = 0.0
    heads = len(head_tables)
    for table in head_tables:
        start = buffer.random_state(rng)
        for s, a, ret in n_step_return(env, table, start, state.horizon, gamma, rng):
            total += ret - table[s, a]
    return state.apply(total, heads)


def estimate_bias(head_tables, env: DiscreteEnv, episodes: int, gamma: float,
                  max_steps: int = 200, rng=None, start_sampler=None) -> float:
    """Mean of ``Q(s, a) - R`` over greedy episodes, averaged over heads.

    ``R`` is the discounted return observed from ``(s, a)`` until the episode
    ends or ``max_steps`` is reached.  Start states come from
    ``start_sampler(rng)`` or, by default, uniformly from the environment.
    """
    rng = np.random.default_rng() if rng is None else rng
    sampler = start_sampler or env.random_state
    per_head = []
    for table in head_tables:
        table = np.asarray(table, dtype=float)
        diffs = []
        for _ in range(episodes):
            states, actions, rewards, _ = _greedy_rollout(env, table, sampler(rng), max_steps, rng)
            ret = 0.0
            for s, a, r in zip(reversed(states), reversed(actions), reversed(rewards)):
                ret = r + gamma * ret
                diffs.append(table[s, a] - ret)
        if diffs:
            per_head.append(np.mean(diffs))
    if not per_head:
        raise ValueError("no state-action pairs were collected")
    return float(np.mean(per_head))


def majority_action(q_heads) -> int:
    """Most common greedy action across heads; ties go to the lowest action index."""
    votes = np.bincount(np.argmax(q_heads, axis=-1), minlength=q_heads.shape[-1])
    return int(np.argmax(votes))


def evaluate(agent: Agent, episodes: int, max_steps: int, rng, test_eps: float = 0.0) -> float:
    env = agent.env
    table = agent.table()
    total = 0.0
    for _ in range(episodes):
        s = env.reset(rng)
        for _ in range(max_steps):
            if rng.random() < test_eps:
                a = int(rng.integers(env.action_count(s)))
            else:
                a = majority_action(table[s])
            res = env.step(s, a, rng)
            total += res.reward
            if res.done:
                break
            s = res.next_state
    return total / episodes


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class DeepLog:
    steps: list = field(default_factory=list)
    eval_return: list = field(default_factory=list)
    bias: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    alpha_trace: list = field(default_factory=list)

    def rows(self):
        for i, step in enumerate(self.steps):
            yield {"step": step, "eval_return": self.eval_return[i], "bias_estimate": self.bias[i],
                   "alpha": self.alpha[i], "loss": self.loss[i]}


def _epsilon(cfg: DeepConfig, step: int) -> float:
    frac = min(step / max(cfg.eps_steps, 1), 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def _log_point(agent: Agent, buffer: ReplayBuffer, log: DeepLog, step: int, losses, rng):
    cfg = agent.cfg
    log.steps.append(step)
    log.eval_return.append(evaluate(agent, cfg.eval_episodes, cfg.eval_max_steps, rng,
                                    cfg.test_eps))
    tables = agent.table()
    sampler = buffer.random_state if len(buffer) else None
    log.bias.append(estimate_bias([tables[:, k] for k in range(agent.net.heads)], agent.env,
                                  cfg.bias_episodes_per_head, cfg.gamma, cfg.bias_max_steps,
                                  rng, sampler))
    log.alpha.append(agent.ada.alpha if cfg.variant in ("te-bdqn", "ada-te-bdqn") else float("nan"))
    log.loss.append(float(np.mean(losses)) if losses else float("nan"))


def train_deep(env: DiscreteEnv, cfg: DeepConfig, seed: int = 0, return_agent: bool = False):
    rng = np.random.default_rng(seed)
    agent = Agent(env, cfg, rng)
    buffer = ReplayBuffer(cfg.buffer_size, agent.net.heads)
    log = DeepLog()
    losses = []
    s = env.reset(rng)
    ep_steps = 0
    head = int(rng.integers(agent.net.heads))
    w1, b1 = agent.net.trunk.weights[0], agent.net.trunk.biases[0]

    for step in range(1, cfg.total_steps + 1):
        # one-hot input: the trunk's first layer reduces to a row lookup
        h = np.maximum(w1[s] + b1, 0.0)
        for w, b in zip(agent.net.trunk.weights[1:], agent.net.trunk.biases[1:]):
            h = np.maximum(h @ w + b, 0.0)
        if cfg.ensemble:
            q = h @ agent.net.head_w[head] + agent.net.head_b[head]
            # untrained heads give an arbitrary deterministic policy; fill the buffer at random
            explore = cfg.random_warmup and len(buffer) < cfg.min_buffer
        else:
            q = h @ agent.net.head_w[0] + agent.net.head_b[0]
            explore = rng.random() < _epsilon(cfg, step)
        n_act = env.action_count(s)
        a = int(rng.integers(n_act)) if explore else int(np.argmax(q[:n_act]))
        res = env.step(s, a, rng)
        mask = (rng.random(agent.net.heads) < cfg.mask_prob).astype(float)
        s2 = res.next_state if not res.done else 0
        buffer.add(s, a, res.reward, s2, res.done, mask)
        ep_steps += 1
        if res.done or ep_steps >= cfg.max_episode_steps:
            s = env.reset(rng)
            ep_steps = 0
            head = int(rng.integers(agent.net.heads))
        else:
            s = res.next_state

        if len(buffer) >= cfg.min_buffer:
            losses.append(agent.train_step(buffer, rng))
        if step % cfg.target_period == 0:
            agent.sync()
            if cfg.variant == "ada-te-bdqn":
                tables = agent.table()
                ada_alpha_update(agent.ada, [tables[:, k] for k in range(agent.net.heads)], env,
                                 buffer, cfg.gamma, rng)
                agent.refresh_targets()
            log.alpha_trace.append(agent.ada.alpha)
        if step % cfg.eval_every == 0:
            _log_point(agent, buffer, log, step, losses, rng)
            losses = []
    if return_agent:
        return log, agent
    return log


__all__ = [
    "VARIANTS",
    "DeepConfig",
    "AdaState",
    "ReplayBuffer",
    "Agent",
    "DeepLog",
    "head_variance",
    "bdqn_targets",
    "masked_td_gradient",
    "n_step_return",
    "ada_alpha_update",
    "estimate_bias",
    "majority_action",
    "evaluate",
    "train_deep",
]
