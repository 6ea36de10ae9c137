"""Bandits, a point-mass control task, and a uniform-bin discretizer.

Environments hold no episode state: ``reset`` returns a state vector and
``step`` maps ``(state, action)`` to a :class:`StepResult`.  The point mass
carries its elapsed time as a second state coordinate so the 20-step horizon
stays a pure function of the state; only the position is observed by agents
(see :meth:`PointMassMdp.observe`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

BANDIT_STATE = np.ones(1)


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: np.ndarray
    done: bool


class Env:
    discrete: bool = False
    obs_dim: int = 1
    action_dim: int = 1
    n_actions: int = 0           # per dimension, discrete envs only
    a_min: float = -1.0
    a_max: float = 1.0
    horizon: int = 1
    gamma: float = 0.0
    is_bandit: bool = False

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, rng=None) -> StepResult:
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    def check_action(self, action) -> None:
        if self.discrete:
            idx = np.atleast_1d(action)
            if idx.shape != (self.action_dim,) or np.any(idx < 0) or np.any(idx >= self.n_actions):
                raise ContractViolation(f"action {action!r} outside {{0..{self.n_actions - 1}}}^{self.action_dim}")
            if not np.all(np.equal(np.mod(idx, 1), 0)):
                raise ContractViolation(f"discrete action {action!r} is not integral")
        else:
            a = np.atleast_1d(np.asarray(action, dtype=np.float64))
            if a.shape != (self.action_dim,) or not np.all(np.isfinite(a)):
                raise ContractViolation(f"action {action!r} has wrong shape or is not finite")
            if np.any(a < self.a_min) or np.any(a > self.a_max):
                raise ContractViolation(f"action {action!r} outside [{self.a_min}, {self.a_max}]")


@dataclass
class KArmedBandit(Env):
    rewards: tuple[float, ...] = (0.0, 0.5, 1.0)

    discrete = True
    is_bandit = True

    def __post_init__(self):
        self.rewards = tuple(float(r) for r in self.rewards)
        self.n_actions = len(self.rewards)

    @property
    def K(self) -> int:
        return len(self.rewards)

    def reset(self, rng=None):
        return BANDIT_STATE.copy()

    def reward(self, arm):
        return np.asarray(self.rewards)[np.asarray(arm, dtype=np.int64)]

    def step(self, state, action, rng=None):
        self.check_action(action)
        arm = int(np.atleast_1d(action)[0])
        return StepResult(self.rewards[arm], BANDIT_STATE.copy(), True)


@dataclass
class BimodalContinuousBandit(Env):
    a_min: float = -2.0
    a_max: float = 2.0
    width: float = 0.5           # the 0.5 in exp(-(a -+ 1)^2 / 0.5)
    modes: tuple[float, float] = (-1.0, 1.0)

    is_bandit = True

    def reset(self, rng=None):
        return BANDIT_STATE.copy()

    def reward(self, a):
        a = np.asarray(a, dtype=np.float64)
        return sum(np.exp(-(a - m) ** 2 / self.width) for m in self.modes)

    def reward_grad(self, a):
        a = np.asarray(a, dtype=np.float64)
        return sum(-2.0 * (a - m) / self.width * np.exp(-(a - m) ** 2 / self.width) for m in self.modes)

    @property
    def max_reward(self) -> float:
        return float(self.reward(self.modes[1]))

    def step(self, state, action, rng=None):
        self.check_action(action)
        a = float(np.atleast_1d(action)[0])
        return StepResult(float(self.reward(a)), BANDIT_STATE.copy(), True)


@dataclass
class PointMassMdp(Env):
    """Position s in [-1, 1], force a in [-1, 1], s' = clip(s + 0.3 a), r = -s'^2.

    State vector is ``[position, t]``; episodes end after ``horizon`` steps.
    """

    gain: float = 0.3
    horizon: int = 20
    gamma: float = 0.99
    a_min: float = -1.0
    a_max: float = 1.0

    obs_dim = 1

    def reset(self, rng):
        return np.array([rng.uniform(-1.0, 1.0), 0.0])

    def observe(self, state):
        return np.asarray(state, dtype=np.float64)[..., :1]

    def dynamics(self, s, a):
        """Vectorised (next_position, reward)."""
        s2 = np.clip(np.asarray(s) + self.gain * np.asarray(a), -1.0, 1.0)
        return s2, -(s2 * s2)

    def step(self, state, action, rng=None):
        self.check_action(action)
        s, t = float(state[0]), int(state[1])
        if t >= self.horizon:
            raise ContractViolation("episode already finished")
        s2, r = self.dynamics(s, float(np.atleast_1d(action)[0]))
        t2 = t + 1
        return StepResult(float(r), np.array([float(s2), float(t2)]), t2 >= self.horizon)


@dataclass
class DiscretizedEnv(Env):
    """Each action dimension of ``inner`` split into ``bins`` uniformly spaced centres."""

    inner: Env = field(default_factory=PointMassMdp)
    bins: int = 7

    discrete = True

    def __post_init__(self):
        if self.inner.discrete:
            raise ConfigError("can only discretize a continuous environment")
        if self.bins < 2:
            raise ConfigError("need at least two bins")
        self.n_actions = self.bins
        self.action_dim = self.inner.action_dim
        self.obs_dim = self.inner.obs_dim
        self.horizon = self.inner.horizon
        self.gamma = self.inner.gamma
        self.is_bandit = self.inner.is_bandit
        self.a_min, self.a_max = self.inner.a_min, self.inner.a_max
        self.centers = np.linspace(self.inner.a_min, self.inner.a_max, self.bins)

    def discretize_action(self, bin_indices) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(bin_indices))
        if idx.shape != (self.action_dim,) or np.any(idx < 0) or np.any(idx >= self.bins):
            raise ContractViolation(f"bin index {bin_indices!r} outside [0, {self.bins})")
        return self.centers[idx.astype(np.int64)]

    def nearest_bin(self, action) -> np.ndarray:
        a = np.atleast_1d(np.asarray(action, dtype=np.float64))
        return np.abs(a[:, None] - self.centers[None, :]).argmin(axis=1)

    def reset(self, rng):
        return self.inner.reset(rng)

    def observe(self, state):
        return self.inner.observe(state)

    def dynamics(self, s, idx):
        return self.inner.dynamics(s, self.centers[np.asarray(idx, dtype=np.int64)])

    def step(self, state, action, rng=None):
        return self.inner.step(state, self.discretize_action(action), rng)


ENV_IDS = ("karmed", "bimodal", "pointmass", "pointmass-disc7")


def make_env(env_id: str) -> Env:
    if env_id == "karmed":
        return KArmedBandit()
    if env_id == "bimodal":
        return BimodalContinuousBandit()
    if env_id == "pointmass":
        return PointMassMdp()
    if env_id == "pointmass-disc7":
        return DiscretizedEnv(PointMassMdp(), bins=7)
    raise ConfigError(f"unknown environment id {env_id!r}; expected one of {ENV_IDS}")
