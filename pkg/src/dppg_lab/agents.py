"""Off-policy actor-critic agents sharing one training loop.

``dpac``  parameter-space actor and critic, DPPG actor updates, ICL critic.
``td3``   deterministic actor with exploration and target-policy noise.
``acrp``  Gaussian actor trained with the reparameterisation gradient.
``aclr``  categorical actor, likelihood-ratio gradient, learned baseline.
``acst``  categorical actor, straight-through gradient.

Each run draws from independent random streams (network init, environment,
action sampling, replay indices, critic-side noise, actor-side noise) split
from one seed, so that runs are reproducible and two agents that make the
same decisions consume identical random numbers.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .critic import (Batch, TwinCritic, icl_update, make_twin_critic, polyak_update, q_values, regress,
                     td_update_action, td_update_param)
from .envs import Env, make_env
from .errors import ConfigError, DivergenceError
from .estimators import grad_dpg, grad_dppg, grad_lr, grad_rp, grad_st, net_critic
from .nn import AdamState, adam_step, init_mlp, mlp_backward, mlp_forward, polyak
from .policy import (CategoricalSpec, DiracSpec, GaussSpec, PolicyHead, action_features, reparam_sample,
                     sample_action, uniform_params)

AGENT_IDS = ("dpac", "td3", "acrp", "aclr", "acst", "dppgtd")


@dataclass
class AgentConfig:
    batch_size: int = 8
    lr: float = 0.01
    tau: float = 0.005
    hidden: int = 16
    n_hidden: int = 2
    gamma: float = 0.99
    buffer_size: int = 2000
    exploration_steps: int = 0
    policy_delay: int = 1
    sigma_min: Optional[float] = None
    sigma_max: Optional[float] = None
    td3_noise: float = 0.1
    td3_target_noise: float = 0.2
    td3_noise_clip: float = 0.5
    actor_target: Optional[bool] = None
    icl: bool = True
    dirac: bool = False
    log_every: int = 100
    # linear DPPG-TD only
    alpha_w: float = 0.1
    alpha_theta: float = 2.0
    m_batch: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.buffer_size < 1 or self.policy_delay < 1 or self.hidden < 1:
            raise ConfigError("batch size, buffer size, hidden width and policy delay must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.exploration_steps < 0:
            raise ConfigError("exploration steps must be non-negative")

    def replace(self, **overrides) -> "AgentConfig":
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)


def bandit_config(**overrides) -> AgentConfig:
    """Hyperparameters for the bandit experiments."""
    return AgentConfig(batch_size=8, lr=0.01, tau=0.005, hidden=16, n_hidden=2, buffer_size=2000,
                       exploration_steps=0, policy_delay=1).replace(**overrides)


def control_config(**overrides) -> AgentConfig:
    """TD3 defaults used for continuous and discretised control."""
    return AgentConfig(batch_size=256, lr=3e-4, tau=0.005, hidden=256, n_hidden=2, gamma=0.99,
                       buffer_size=1_000_000, exploration_steps=25_000, policy_delay=2,
                       td3_noise=0.1, td3_target_noise=0.2, td3_noise_clip=0.5).replace(**overrides)


def desk_control_config(**overrides) -> AgentConfig:
    """Control defaults shrunk to fit the 20-step point mass on one core."""
    return control_config(batch_size=64, lr=1e-3, hidden=64, buffer_size=100_000,
                          exploration_steps=1000).replace(**overrides)


def default_config(env_id: str, **overrides) -> AgentConfig:
    if env_id in ("karmed", "bimodal"):
        return bandit_config(**overrides)
    return desk_control_config(**overrides)


# -- random streams, replay, logs -------------------------------------------------

STREAMS = ("init", "env", "act", "replay", "critic", "actor")


@dataclass
class RunRngs:
    init: np.random.Generator
    env: np.random.Generator
    act: np.random.Generator
    replay: np.random.Generator
    critic: np.random.Generator
    actor: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return cls(*(np.random.default_rng(c) for c in children))


class ReplayBuffer:
    """Ring buffer with uniform sampling (with replacement) over stored transitions."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, param_dim: int = 0, discrete: bool = False):
        self.capacity = int(capacity)
        self.S = np.zeros((self.capacity, obs_dim))
        self.S2 = np.zeros((self.capacity, obs_dim))
        self.A = np.zeros((self.capacity, action_dim), dtype=np.int64 if discrete else np.float64)
        self.U = np.zeros((self.capacity, param_dim)) if param_dim else None
        self.R = np.zeros(self.capacity)
        self.done = np.zeros(self.capacity)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, s, a, s2, r, done, u=None):
        i = self.pos
        self.S[i] = s
        self.A[i] = a
        self.S2[i] = s2
        self.R[i] = r
        self.done[i] = float(done)
        if self.U is not None:
            self.U[i] = u
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ConfigError("cannot sample from an empty buffer")
        idx = self.sample_indices(n, rng)
        return Batch(self.S[idx], self.A[idx], self.S2[idx], self.R[idx], self.done[idx],
                     None if self.U is None else self.U[idx])


LOG_COLUMNS = ("step", "episodic_return", "actor_loss", "critic_loss")


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class RunLog:
    agent: str
    env: str
    seed: int
    steps: int
    episodic_return: np.ndarray = None
    actor_loss: np.ndarray = None
    critic_loss: np.ndarray = None
    explored: np.ndarray = None
    actor_updated: np.ndarray = None
    diagnostic: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("episodic_return", "actor_loss", "critic_loss"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(self.steps, np.nan))
        if self.explored is None:
            self.explored = np.zeros(self.steps, dtype=bool)
        if self.actor_updated is None:
            self.actor_updated = np.zeros(self.steps, dtype=bool)

    @property
    def aborted(self) -> bool:
        return bool(self.diagnostic)

    @property
    def step_column(self) -> np.ndarray:
        return np.arange(1, self.steps + 1)

    def returns(self):
        """``(steps, returns)`` of every finished episode."""
        mask = ~np.isnan(self.episodic_return)
        return self.step_column[mask], self.episodic_return[mask]

    def final_performance(self, fraction: float = 0.1) -> float:
        """Mean return of episodes that ended in the final ``fraction`` of steps."""
        steps, rets = self.returns()
        cutoff = self.steps - int(round(fraction * self.steps))
        sel = rets[steps > cutoff]
        return float(sel.mean()) if len(sel) else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for i in range(self.steps):
            w.writerow([i + 1, _fmt(self.episodic_return[i]), _fmt(self.actor_loss[i]), _fmt(self.critic_loss[i])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path, agent="", env="", seed=0) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        steps = len(rows)
        col = lambda k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows])
        return cls(agent, env, seed, steps, col("episodic_return"), col("actor_loss"), col("critic_loss"))


# -- agents ---------------------------------------------------------------------------

def gauss_spec_for(env: Env, config: AgentConfig) -> GaussSpec:
    if env.is_bandit:
        lo, hi = math.exp(-3.0), math.e
    else:
        lo, hi = 0.05, 0.2
    lo = config.sigma_min if config.sigma_min is not None else lo
    hi = config.sigma_max if config.sigma_max is not None else hi
    return GaussSpec(env.a_min, env.a_max, lo, hi, env.action_dim)


def _actor(env: Env, spec, config: AgentConfig, rng) -> PolicyHead:
    sizes = [env.obs_dim] + [config.hidden] * config.n_hidden + [spec.param_dim]
    return PolicyHead(init_mlp(sizes, rng), spec)


def _ascend(opt: AdamState, actor: PolicyHead, grads: np.ndarray) -> None:
    adam_step(opt, actor.net, -grads)


class Agent:
    name = ""
    default_actor_target = False

    def __init__(self, env: Env, config: AgentConfig, rngs: RunRngs):
        self.env = env
        self.config = config
        self.rngs = rngs
        self.gamma = config.gamma
        self.spec = self.make_spec()
        self.actor = _actor(env, self.spec, config, rngs.init)
        self.critic: TwinCritic = make_twin_critic(env.obs_dim + self.critic_input_dim(), config.hidden,
                                                   rngs.init, config.lr, config.tau, config.n_hidden)
        self.actor_opt = AdamState.for_net(self.actor.net, config.lr)
        use_target = self.default_actor_target if config.actor_target is None else config.actor_target
        self.actor_target = self.actor.copy() if use_target else None

    # overridden per agent
    def make_spec(self):
        raise NotImplementedError

    def critic_input_dim(self) -> int:
        return self.spec.action_feature_dim

    param_dim = 0

    def act(self, obs, explore: bool):
        """Returns ``(env_action, stored_action, stored_params)``."""
        raise NotImplementedError

    def update_critic(self, batch: Batch) -> float:
        raise NotImplementedError

    def update_actor(self, batch: Batch) -> float:
        raise NotImplementedError

    def update_targets(self) -> None:
        polyak_update(self.critic)
        if self.actor_target is not None:
            polyak(self.actor_target.net, self.actor.net, self.config.tau)

    @property
    def next_actor(self) -> PolicyHead:
        return self.actor_target if self.actor_target is not None else self.actor

    def policy_params(self, obs):
        return self.actor.params(np.atleast_2d(obs))

    def eval_action(self, obs, rng):
        """On-policy action used by :func:`evaluate_policy`."""
        u = self.policy_params(obs)[0]
        return sample_action(self.spec, u, rng)


class Dpac(Agent):
    name = "dpac"

    def __init__(self, env, config, rngs):
        super().__init__(env, config, rngs)
        self.param_dim = self.spec.param_dim

    def make_spec(self):
        env, cfg = self.env, self.config
        if env.discrete:
            if cfg.dirac:
                raise ConfigError("Dirac mode needs a continuous action space")
            return CategoricalSpec(env.n_actions, env.action_dim)
        if cfg.dirac:
            return DiracSpec(env.a_min, env.a_max, env.action_dim)
        return gauss_spec_for(env, cfg)

    def critic_input_dim(self):
        return self.spec.param_dim

    def act(self, obs, explore):
        if explore:
            u = uniform_params(self.spec, self.rngs.act)
        else:
            u = self.policy_params(obs)[0]
        a = sample_action(self.spec, u, self.rngs.act)
        return a, a, u

    def update_critic(self, batch):
        if self.config.icl:
            return icl_update(self.critic, self.next_actor, batch, self.gamma, self.rngs.critic)
        return td_update_param(self.critic, self.next_actor, batch, self.gamma)

    def update_actor(self, batch):
        crit = net_critic(self.critic.q1)
        est = grad_dppg(self.actor, crit, batch.S)
        loss = -float(q_values(self.critic.q1, batch.S, self.actor.params(batch.S)).mean())
        _ascend(self.actor_opt, self.actor, est.grads)
        return loss


class Td3(Agent):
    name = "td3"
    default_actor_target = True

    def make_spec(self):
        if self.env.discrete:
            raise ConfigError("TD3 needs a continuous action space")
        return DiracSpec(self.env.a_min, self.env.a_max, self.env.action_dim)

    @property
    def half_range(self):
        return 0.5 * (self.env.a_max - self.env.a_min)

    def act(self, obs, explore):
        env = self.env
        if explore:
            a = self.rngs.act.uniform(env.a_min, env.a_max, env.action_dim)
        else:
            mu = self.policy_params(obs)[0]
            noise = self.rngs.act.normal(0.0, 1.0, env.action_dim) * (self.config.td3_noise * self.half_range)
            a = np.clip(mu + noise, env.a_min, env.a_max)
        return a, a, None

    def target_noise(self, shape):
        scale = self.config.td3_target_noise * self.half_range
        clip = self.config.td3_noise_clip * self.half_range
        return np.clip(self.rngs.critic.normal(0.0, 1.0, shape) * scale, -clip, clip)

    def next_action(self, S2):
        a = self.next_actor.params(S2)
        return np.clip(a + self.target_noise(a.shape), self.env.a_min, self.env.a_max)

    def update_critic(self, batch):
        return td_update_action(self.critic, self.spec, self.next_action, batch, self.gamma)

    def update_actor(self, batch):
        est = grad_dpg(self.actor, net_critic(self.critic.q1), batch.S)
        loss = -float(q_values(self.critic.q1, batch.S, self.actor.params(batch.S)).mean())
        _ascend(self.actor_opt, self.actor, est.grads)
        return loss

    def eval_action(self, obs, rng):
        return self.policy_params(obs)[0]


class AcRp(Agent):
    name = "acrp"

    def make_spec(self):
        if self.env.discrete:
            raise ConfigError("AC-RP needs a continuous action space")
        return gauss_spec_for(self.env, self.config)

    def act(self, obs, explore):
        if explore:
            u = uniform_params(self.spec, self.rngs.act)
        else:
            u = self.policy_params(obs)[0]
        eps = self.rngs.act.standard_normal(self.spec.dims)
        a = reparam_sample(self.spec, u, eps)
        return a, a, None

    def next_action(self, S2):
        u = self.next_actor.params(S2)
        eps = self.rngs.critic.standard_normal((len(S2), self.spec.dims))
        return reparam_sample(self.spec, u, eps)

    def update_critic(self, batch):
        return td_update_action(self.critic, self.spec, self.next_action, batch, self.gamma)

    def update_actor(self, batch):
        eps = self.rngs.actor.standard_normal((len(batch), self.spec.dims))
        crit = net_critic(self.critic.q1)
        est = grad_rp(self.actor, crit, batch.S, eps)
        a = reparam_sample(self.spec, self.actor.params(batch.S), eps)
        loss = -float(q_values(self.critic.q1, batch.S, a).mean())
        _ascend(self.actor_opt, self.actor, est.grads)
        return loss


class _Categorical(Agent):
    def make_spec(self):
        if not self.env.discrete:
            raise ConfigError(f"{self.name} needs a discrete action space")
        return CategoricalSpec(self.env.n_actions, self.env.action_dim)

    def act(self, obs, explore):
        if explore:
            a = self.rngs.act.integers(0, self.spec.n, self.spec.dims)
        else:
            a = sample_action(self.spec, self.policy_params(obs)[0], self.rngs.act)
        return a, a, None

    def next_action(self, S2):
        return sample_action(self.spec, self.next_actor.params(S2), self.rngs.critic)

    def fresh_actions(self, S, rng):
        return sample_action(self.spec, self.actor.params(S), rng)


class AcLr(_Categorical):
    name = "aclr"

    def __init__(self, env, config, rngs):
        super().__init__(env, config, rngs)
        sizes = [env.obs_dim] + [config.hidden] * config.n_hidden + [1]
        self.baseline = init_mlp(sizes, rngs.init)
        self.baseline_opt = AdamState.for_net(self.baseline, config.lr)

    def v(self, S):
        return mlp_forward(self.baseline, np.atleast_2d(S))[0][:, 0]

    def q1(self, S, A):
        return q_values(self.critic.q1, S, action_features(self.spec, A))

    def update_critic(self, batch):
        loss = td_update_action(self.critic, self.spec, self.next_action, batch, self.gamma)
        a_tilde = self.fresh_actions(batch.S, self.rngs.critic)
        y = self.q1(batch.S, a_tilde)
        q, tape = mlp_forward(self.baseline, batch.S)
        err = q[:, 0] - y
        grads, _ = mlp_backward(self.baseline, tape, err[:, None] / len(y), need_input_grad=False)
        adam_step(self.baseline_opt, self.baseline, grads)
        return loss

    def update_actor(self, batch):
        a_tilde = self.fresh_actions(batch.S, self.rngs.actor)
        est = grad_lr(self.actor, self.q1, self.v, batch.S, a_tilde)
        loss = -float((self.q1(batch.S, a_tilde) - self.v(batch.S)).mean())
        _ascend(self.actor_opt, self.actor, est.grads)
        return loss


class AcSt(_Categorical):
    name = "acst"

    def update_critic(self, batch):
        return td_update_action(self.critic, self.spec, self.next_action, batch, self.gamma)

    def update_actor(self, batch):
        a_tilde = self.fresh_actions(batch.S, self.rngs.actor)
        est = grad_st(self.actor, net_critic(self.critic.q1), batch.S, a_tilde)
        loss = -float(q_values(self.critic.q1, batch.S, action_features(self.spec, a_tilde)).mean())
        _ascend(self.actor_opt, self.actor, est.grads)
        return loss


AGENTS = {"dpac": Dpac, "td3": Td3, "acrp": AcRp, "aclr": AcLr, "acst": AcSt}


def make_agent(agent_id: str, env: Env, config: AgentConfig, rngs: RunRngs) -> Agent:
    try:
        cls = AGENTS[agent_id]
    except KeyError:
        raise ConfigError(f"unknown agent {agent_id!r}; expected one of {AGENT_IDS}") from None
    return cls(env, config, rngs)


def run_agent(agent: Agent, steps: int, seed: int, env_id: str = "") -> RunLog:
    """The shared off-policy loop: act, store, one critic step, delayed actor/target steps."""
    env, cfg, rngs = agent.env, agent.config, agent.rngs
    log = RunLog(agent.name, env_id, seed, steps)
    buffer = ReplayBuffer(min(cfg.buffer_size, max(steps, 1)), env.obs_dim, env.action_dim,
                          agent.param_dim, env.discrete)
    state = env.reset(rngs.env)
    ep_return = 0.0
    critic_loss = actor_loss = float("nan")
    try:
        for t in range(1, steps + 1):
            obs = env.observe(state)
            explore = t <= cfg.exploration_steps
            a_env, a_store, u = agent.act(obs, explore)
            res = env.step(state, a_env, rngs.env)
            buffer.add(obs, a_store, env.observe(res.next_state), res.reward, res.done, u)
            ep_return += res.reward
            log.explored[t - 1] = explore
            if res.done:
                log.episodic_return[t - 1] = ep_return
                ep_return = 0.0
                state = env.reset(rngs.env)
            else:
                state = res.next_state
            if t > cfg.exploration_steps:
                batch = buffer.sample(cfg.batch_size, rngs.replay)
                critic_loss = agent.update_critic(batch)
                if t % cfg.policy_delay == 0:
                    actor_loss = agent.update_actor(batch)
                    agent.update_targets()
                    log.actor_updated[t - 1] = True
            if t % cfg.log_every == 0:
                log.critic_loss[t - 1] = critic_loss
                log.actor_loss[t - 1] = actor_loss
            if not (math.isfinite(critic_loss) or math.isnan(critic_loss)):
                raise DivergenceError(f"critic loss became {critic_loss} at step {t}")
    except DivergenceError as exc:
        log.diagnostic = f"aborted at step {t}: {exc}"
    log.extra["agent"] = agent
    return log


def train(agent_id: str, env_id: str, steps: int, seed: int, config: Optional[AgentConfig] = None) -> RunLog:
    if agent_id == "dppgtd":
        from .dppg_td import run_dppg_td_linear
        return run_dppg_td_linear(env_id, config or default_config(env_id), steps, seed)
    env = make_env(env_id)
    config = config or default_config(env_id)
    agent = make_agent(agent_id, env, config, RunRngs.from_seed(seed))
    return run_agent(agent, steps, seed, env_id)


def run_dpac(env_id, steps, seed, config=None):
    return train("dpac", env_id, steps, seed, config)


def run_td3(env_id, steps, seed, config=None):
    return train("td3", env_id, steps, seed, config)


def run_ac_rp(env_id, steps, seed, config=None):
    return train("acrp", env_id, steps, seed, config)


def run_ac_lr(env_id, steps, seed, config=None):
    return train("aclr", env_id, steps, seed, config)


def run_ac_st(env_id, steps, seed, config=None):
    return train("acst", env_id, steps, seed, config)


def evaluate_policy(env: Env, agent: Agent, episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of on-policy rollouts."""
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        done = False
        while not done:
            a = agent.eval_action(env.observe(state), rng)
            res = env.step(state, a, rng)
            total += res.reward
            state, done = res.next_state, res.done
    return total / episodes
