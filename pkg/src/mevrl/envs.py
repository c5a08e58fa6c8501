"""Discrete test environments: the maximization-bias MDP and cliff walking.

States are integers; ``TERMINAL`` (-1) marks the absorbing end state.  Each
environment offers a scalar ``step`` and a vectorised ``step_batch`` that
advances many independent copies at once (used by the tabular learners,
which run all repetitions in lockstep).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TERMINAL = -1


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class StepResult:
    next_state: int
    reward: float
    done: bool


class DiscreteEnv:
    """Common surface; subclasses define the transition rules."""

    n_states: int = 0
    max_actions: int = 0
    start_state: int = 0

    def action_count(self, state: int) -> int:
        raise NotImplementedError

    def action_counts(self) -> np.ndarray:
        return np.array([self.action_count(s) for s in range(self.n_states)])

    def action_mask(self) -> np.ndarray:
        """Boolean ``(n_states, max_actions)`` table of valid actions."""
        counts = self.action_counts()
        return np.arange(self.max_actions)[None, :] < counts[:, None]

    def reset(self, rng: np.random.Generator | None = None) -> int:
        return self.start_state

    def random_state(self, rng: np.random.Generator) -> int:
        """Uniform draw over non-terminal states."""
        return int(rng.integers(self.n_states))

    def set_state(self, state: int) -> int:
        self._check_state(state)
        return state

    def _check_state(self, state: int):
        if state == TERMINAL:
            raise EnvError("cannot act from the terminal state")
        if not (0 <= state < self.n_states):
            raise EnvError(f"state {state} out of range")

    def _check_action(self, state: int, action: int):
        if not (0 <= action < self.action_count(state)):
            raise EnvError(f"invalid action {action} in state {state}")

    def step(self, state: int, action: int, rng: np.random.Generator) -> StepResult:
        self._check_state(state)
        self._check_action(state, action)
        s, r, d = self.step_batch(np.array([state]), np.array([action]), rng)
        return StepResult(int(s[0]), float(r[0]), bool(d[0]))

    def step_batch(self, states, actions, rng):
        raise NotImplementedError

    def encode(self, state: int) -> np.ndarray:
        """One-hot vector over the state index space."""
        self._check_state(state)
        x = np.zeros(self.n_states)
        x[state] = 1.0
        return x

    def encode_batch(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=int)
        x = np.zeros((states.size, self.n_states))
        ok = states >= 0
        x[np.flatnonzero(ok), states[ok]] = 1.0
        return x


class MaxBiasMDP(DiscreteEnv):
    """State A (0) offers left -> B and right -> end; every B action ends with N(mean, sd^2)."""

    A, B = 0, 1
    LEFT, RIGHT = 0, 1
    n_states = 2
    start_state = 0

    def __init__(self, b_actions: int = 8, reward_mean: float = -0.1, reward_sd: float = 1.0):
        if b_actions < 1:
            raise EnvError("state B needs at least one action")
        self.b_actions = b_actions
        self.reward_mean = reward_mean
        self.reward_sd = reward_sd
        self.max_actions = max(2, b_actions)

    def action_count(self, state: int) -> int:
        return 2 if state == self.A else self.b_actions

    def step(self, state: int, action: int, rng) -> StepResult:
        self._check_state(state)
        self._check_action(state, action)
        if state == self.A:
            if action == self.LEFT:
                return StepResult(self.B, 0.0, False)
            return StepResult(TERMINAL, 0.0, True)
        return StepResult(TERMINAL, self.reward_mean + self.reward_sd * rng.standard_normal(), True)

    def step_batch(self, states, actions, rng):
        states = np.asarray(states)
        actions = np.asarray(actions)
        at_a = states == self.A
        go_left = at_a & (actions == self.LEFT)
        next_states = np.where(go_left, self.B, TERMINAL)
        noise = rng.standard_normal(states.shape)
        rewards = np.where(at_a, 0.0, self.reward_mean + self.reward_sd * noise)
        return next_states, rewards, ~go_left


class CliffWalk(DiscreteEnv):
    """Grid of ``width x height`` cells, index ``y * width + x`` with row 0 at the bottom.

    S is the lower-left cell, G the lower-right one; the bottom-row cells in
    between form the cliff.  Actions: 0 up, 1 down, 2 left, 3 right.
    """

    UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
    _STEPS = ((0, 1), (0, -1), (-1, 0), (1, 0))
    _MOVES = np.array(_STEPS)

    def __init__(self, width: int = 10, height: int = 5, cliff_reward: float = -100.0,
                 step_reward: float = -1.0):
        if width < 3 or height < 2:
            raise EnvError("grid too small for a cliff")
        self.width = width
        self.height = height
        self.n_states = width * height
        self.max_actions = 4
        self.start_state = 0
        self.goal_state = width - 1
        self.cliff_reward = cliff_reward
        self.step_reward = step_reward

    def action_count(self, state: int) -> int:
        return 4

    def is_cliff(self, state) -> np.ndarray:
        state = np.asarray(state)
        return (state > 0) & (state < self.goal_state)

    def coords(self, state):
        return np.asarray(state) % self.width, np.asarray(state) // self.width

    def random_state(self, rng):
        # non-terminal cells the agent can actually occupy: not cliff, not goal
        valid = [s for s in range(self.n_states) if not self.is_cliff(s) and s != self.goal_state]
        return int(rng.choice(valid))

    def step(self, state: int, action: int, rng=None) -> StepResult:
        self._check_state(state)
        self._check_action(state, action)
        x, y = state % self.width, state // self.width
        dx, dy = self._STEPS[action]
        x = min(max(x + dx, 0), self.width - 1)
        y = min(max(y + dy, 0), self.height - 1)
        nxt = y * self.width + x
        if 0 < nxt < self.goal_state:
            return StepResult(self.start_state, self.cliff_reward, False)
        if nxt == self.goal_state:
            return StepResult(TERMINAL, self.step_reward, True)
        return StepResult(nxt, self.step_reward, False)

    def step_batch(self, states, actions, rng=None):
        states = np.asarray(states)
        actions = np.asarray(actions)
        x, y = self.coords(states)
        move = self._MOVES[actions]
        nx = np.minimum(np.maximum(x + move[..., 0], 0), self.width - 1)
        ny = np.minimum(np.maximum(y + move[..., 1], 0), self.height - 1)
        nxt = ny * self.width + nx
        fell = self.is_cliff(nxt)
        done = nxt == self.goal_state
        rewards = np.where(fell, self.cliff_reward, self.step_reward)
        nxt = np.where(fell, self.start_state, np.where(done, TERMINAL, nxt))
        return nxt, rewards.astype(float), done


def make_env(name: str) -> DiscreteEnv:
    if name in ("maxbias", "simple-mdp", "max-bias"):
        return MaxBiasMDP()
    if name == "cliff":
        return CliffWalk()
    raise EnvError(f"unknown environment {name!r}")


__all__ = ["TERMINAL", "EnvError", "StepResult", "DiscreteEnv", "MaxBiasMDP", "CliffWalk",
           "make_env"]
