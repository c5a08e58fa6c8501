"""Tabular Q-learning family: Q, Double Q, TE-Q, KE-Q and a WE-target variant.

All repetitions of an experiment run in lockstep: Q-tables carry a leading
run axis ``(R, S, A)`` and every step is one vectorised update over the runs
whose episode is still going.

TE/KE targets need a variance for every ``Q(s', a')``.  It comes from an
exponentially weighted process variance of the TD targets, normalised by a
Kish effective sample size built from the same learning rates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .envs import DiscreteEnv, TERMINAL
from .kernels import IndicatorAlpha, KernelSpec

ALGORITHMS = ("q", "doubleq", "teq", "keq", "weq")
RUN_BLOCK = 1000


# ---------------------------------------------------------------------------
# variance tracking
# ---------------------------------------------------------------------------

def kish_update(omega, omega_sq, tau):
    """One step of the weight-sum and squared-weight-sum recursions."""
    return (1.0 - tau) * omega + tau, (1.0 - tau) ** 2 * omega_sq + tau * tau


def effective_sample_size(omega, omega_sq):
    """``omega^2 / omega_sq``; entries never updated count as one observation."""
    omega = np.asarray(omega, dtype=float)
    omega_sq = np.asarray(omega_sq, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where(omega_sq > 0, omega * omega / omega_sq, 1.0)
    return n if n.ndim else float(n)


def process_var_update(process_var, tau, target, q):
    return (1.0 - tau) * (process_var + tau * (target - q) ** 2)


@dataclass(frozen=True)
class VarianceTracker:
    process_var: float = 1.0
    omega: float = 0.0
    omega_sq: float = 0.0

    @property
    def n_eff(self) -> float:
        return effective_sample_size(self.omega, self.omega_sq)

    @property
    def variance(self) -> float:
        """Variance of the action-value estimate fed to TE/KE targets."""
        return self.process_var / self.n_eff

    def update(self, tau: float, target: float, q: float) -> "VarianceTracker":
        if not (0.0 < tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        omega, omega_sq = kish_update(self.omega, self.omega_sq, tau)
        pv = process_var_update(self.process_var, tau, target, q)
        return VarianceTracker(pv, omega, omega_sq)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabularConfig:
    algorithm: str = "q"
    alpha: float = 0.05
    kernel: KernelSpec | None = None
    gamma: float = 1.0
    exploration: str = "constant"
    epsilon: float = 0.1
    learning_rate: str = "constant"
    tau: float = 0.1
    episodes: int = 300
    init_process_var: float = 1.0
    we_draws: int = 100
    max_steps: int = 100_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.algorithm == "teq" and not (0.0 < self.alpha <= 0.5):
            raise ValueError("alpha must lie in (0, 0.5]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.exploration not in ("constant", "annealed"):
            raise ValueError("exploration must be 'constant' or 'annealed'")
        if self.learning_rate not in ("constant", "poly"):
            raise ValueError("learning_rate must be 'constant' or 'poly'")
        if self.init_process_var <= 0:
            raise ValueError("initial process variance must be positive")

    @property
    def weight_kernel(self) -> KernelSpec | None:
        if self.algorithm == "teq":
            return IndicatorAlpha(self.alpha)
        if self.algorithm == "keq":
            if self.kernel is None:
                raise ValueError("keq needs a kernel")
            return self.kernel
        return None


def poly_learning_rate(n_sa):
    """``0.1 * 101 / (100 + n(s, a))`` with the visit count already incremented."""
    return 0.1 * 101.0 / (100.0 + np.asarray(n_sa, dtype=float))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def bootstrap_values(cfg: TabularConfig, q_next, var_next=None, neff_next=None,
                     mask=None, q_eval=None, rng=None):
    """Estimated maximum over actions at ``s'`` for a batch ``(B, A)``.

    Returns ``(values, retained)``; ``retained`` counts actions with positive
    weight (the number of averaged means for TE).  ``q_eval`` is the second
    table for Double Q.
    """
    q_next = np.asarray(q_next, dtype=float)
    retained = np.ones(q_next.shape[:-1], dtype=int)
    if cfg.algorithm == "q":
        return est.me_batch(q_next, mask), retained
    if cfg.algorithm == "doubleq":
        pick = est.champion_index(q_next, mask)[..., None]
        return np.take_along_axis(np.asarray(q_eval, float), pick, axis=-1)[..., 0], retained
    if cfg.algorithm == "weq":
        sds = np.sqrt(np.asarray(var_next) / np.asarray(neff_next))
        rng = np.random.default_rng() if rng is None else rng
        return est.we_batch(q_next, sds, cfg.we_draws, rng, mask), retained
    kernel = cfg.weight_kernel
    values, w = est.ke_batch(q_next, var_next, neff_next, kernel, mask, return_weights=True)
    return values, (w > 0).sum(axis=-1)


def compute_target(cfg: TabularConfig, reward: float, q_next, done: bool = False,
                   var_next=None, neff_next=None, q_eval=None, rng=None):
    """Scalar TD target ``r + gamma * max-estimate``; ``done`` drops the bootstrap."""
    if done:
        return float(reward), 0
    q_next = np.asarray(q_next, dtype=float)
    if var_next is None:
        var_next = np.ones_like(q_next)
    if neff_next is None:
        neff_next = np.ones_like(q_next)
    v, k = bootstrap_values(cfg, q_next[None], np.asarray(var_next, float)[None],
                            np.asarray(neff_next, float)[None], None,
                            None if q_eval is None else np.asarray(q_eval, float)[None], rng)
    return float(reward + cfg.gamma * v[0]), int(k[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    """Per-run, per-episode records, each of shape ``(runs, episodes)``."""

    returns: np.ndarray
    first_action: np.ndarray
    q_start: np.ndarray
    q_start_first: np.ndarray
    retained: np.ndarray
    lengths: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def runs(self) -> int:
        return self.returns.shape[0]

    @property
    def episodes(self) -> int:
        return self.returns.shape[1]

    def left_fraction(self) -> np.ndarray:
        """Share of runs taking action 0 first, per episode."""
        return (self.first_action == 0).mean(axis=0)

    def rows(self):
        for r in range(self.runs):
            for e in range(self.episodes):
                yield {
                    "run": r,
                    "episode": e + 1,
                    "return": float(self.returns[r, e]),
                    "first_action": int(self.first_action[r, e]),
                    "q_start_max": float(self.q_start[r, e]),
                    "q_start_a0": float(self.q_start_first[r, e]),
                    "retained": int(self.retained[r, e]),
                    "length": int(self.lengths[r, e]),
                }

    @staticmethod
    def concat(logs: list["TrainLog"]) -> "TrainLog":
        keys = ("returns", "first_action", "q_start", "q_start_first", "retained", "lengths")
        return TrainLog(*(np.concatenate([getattr(l, k) for l in logs]) for k in keys))


class _Tables:
    def __init__(self, runs, env: DiscreteEnv, cfg: TabularConfig):
        s, a = env.n_states, env.max_actions
        self.q = np.zeros((runs, s, a))
        self.q2 = np.zeros((runs, s, a)) if cfg.algorithm == "doubleq" else None
        self.pvar = np.full((runs, s, a), cfg.init_process_var)
        self.omega = np.zeros((runs, s, a))
        self.omega_sq = np.zeros((runs, s, a))
        self.n_s = np.zeros((runs, s))
        self.n_sa = np.zeros((runs, s, a))

    def behaviour(self, idx, s):
        """Action values that drive exploration, for the rows ``(idx, s)``."""
        if self.q2 is None:
            return self.q[idx, s]
        return self.q[idx, s] + self.q2[idx, s]

    def estimate(self):
        return self.q if self.q2 is None else 0.5 * (self.q + self.q2)


def _epsilon_greedy(q_rows, valid, eps, rng):
    """Greedy with uniform tie-breaking; random valid action with probability ``eps``."""
    q_rows = np.where(valid, q_rows, -np.inf)
    top = q_rows.max(axis=1, keepdims=True)
    score = np.where(q_rows == top, rng.random(q_rows.shape), -1.0)
    greedy = score.argmax(axis=1)
    counts = valid.sum(axis=1)
    random_a = np.floor(rng.random(counts.size) * counts).astype(int)
    explore = rng.random(counts.size) < eps
    return np.where(explore, random_a, greedy)


def _run_block(env: DiscreteEnv, cfg: TabularConfig, runs: int, rng: np.random.Generator,
               probe_state: int, retained_state: int) -> TrainLog:
    t = _Tables(runs, env, cfg)
    mask = env.action_mask()
    kernel = cfg.weight_kernel
    shape = (runs, cfg.episodes)
    returns = np.zeros(shape)
    first_action = np.full(shape, -1, dtype=int)
    q_start = np.zeros(shape)
    q_start_first = np.zeros(shape)
    retained = np.zeros(shape, dtype=int)
    lengths = np.zeros(shape, dtype=int)
    rows = np.arange(runs)

    for ep in range(cfg.episodes):
        state = np.full(runs, env.reset(rng), dtype=int)
        active = np.ones(runs, dtype=bool)
        steps = 0
        while active.any() and steps < cfg.max_steps:
            idx = rows[active]
            s = state[idx]
            t.n_s[idx, s] += 1
            if cfg.exploration == "annealed":
                eps = 1.0 / np.sqrt(t.n_s[idx, s])
            else:
                eps = cfg.epsilon
            a = _epsilon_greedy(t.behaviour(idx, s), mask[s], eps, rng)
            if steps == 0:
                first_action[idx, ep] = a
            s2, r, done = env.step_batch(s, a, rng)
            returns[idx, ep] += r
            lengths[idx, ep] += 1

            t.n_sa[idx, s, a] += 1
            if cfg.learning_rate == "poly":
                tau = poly_learning_rate(t.n_sa[idx, s, a])
            else:
                tau = cfg.tau

            # 1) effective sample size of the updated pair
            t.omega[idx, s, a], t.omega_sq[idx, s, a] = kish_update(
                t.omega[idx, s, a], t.omega_sq[idx, s, a], tau)

            # 2) target
            s2c = np.where(done, 0, s2)
            if cfg.algorithm == "doubleq":
                flip = rng.random(idx.size) < 0.5
                upd = np.where(flip[:, None], t.q[idx, s2c], t.q2[idx, s2c])
                other = np.where(flip[:, None], t.q2[idx, s2c], t.q[idx, s2c])
                boot, _ = bootstrap_values(cfg, upd, mask=mask[s2c], q_eval=other)
                current = np.where(flip, t.q[idx, s, a], t.q2[idx, s, a])
            else:
                q_next = t.q[idx, s2c]
                var_next = t.pvar[idx, s2c]
                neff_next = effective_sample_size(t.omega[idx, s2c], t.omega_sq[idx, s2c])
                boot, _ = bootstrap_values(cfg, q_next, var_next, neff_next, mask[s2c], rng=rng)
                current = t.q[idx, s, a]
            y = r + cfg.gamma * np.where(done, 0.0, boot)

            # 3) process variance, 4) action value
            t.pvar[idx, s, a] = process_var_update(t.pvar[idx, s, a], tau, y, current)
            new_q = current + tau * (y - current)
            if cfg.algorithm == "doubleq":
                t.q[idx[flip], s[flip], a[flip]] = new_q[flip]
                t.q2[idx[~flip], s[~flip], a[~flip]] = new_q[~flip]
            else:
                t.q[idx, s, a] = new_q

            state[idx] = np.where(done, TERMINAL, s2)
            active[idx] = ~done
            steps += 1

        est_q = t.estimate()
        q_start[:, ep] = np.where(mask[probe_state], est_q[:, probe_state], -np.inf).max(axis=1)
        q_start_first[:, ep] = est_q[:, probe_state, 0]
        if kernel is not None:
            neff = effective_sample_size(t.omega[:, retained_state], t.omega_sq[:, retained_state])
            _, w = est.ke_batch(t.q[:, retained_state], t.pvar[:, retained_state], neff, kernel,
                                np.broadcast_to(mask[retained_state], (runs, env.max_actions)),
                                return_weights=True)
            retained[:, ep] = (w > 0).sum(axis=1)
        else:
            retained[:, ep] = 1
    return TrainLog(returns, first_action, q_start, q_start_first, retained, lengths,
                    {"q": t.estimate()})


def train_tabular(env: DiscreteEnv, cfg: TabularConfig, runs: int = 100, seed: int = 0,
                  probe_state: int | None = None, retained_state: int | None = None,
                  block: int = RUN_BLOCK) -> TrainLog:
    """Train ``runs`` independent learners; runs are processed in blocks of ``block``.

    Each block draws from its own stream keyed by ``(seed, block index)``.
    ``probe_state`` (default: the start state) is where ``max_a Q`` is logged;
    ``retained_state`` (default: the state with the most actions) is where the
    number of retained means is counted.
    """
    if runs < 1:
        raise ValueError("runs must be positive")
    probe = env.start_state if probe_state is None else probe_state
    if retained_state is None:
        retained_state = int(np.argmax(env.action_counts()))
    logs = []
    finals = []
    for b, start in enumerate(range(0, runs, block)):
        size = min(block, runs - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        log = _run_block(env, cfg, size, rng, probe, retained_state)
        logs.append(log)
        finals.append(log.extras["q"])
    out = TrainLog.concat(logs)
    out.extras["q"] = np.concatenate(finals)
    return out


__all__ = [
    "ALGORITHMS",
    "VarianceTracker",
    "TabularConfig",
    "TrainLog",
    "kish_update",
    "effective_sample_size",
    "process_var_update",
    "poly_learning_rate",
    "bootstrap_values",
    "compute_target",
    "train_tabular",
]
