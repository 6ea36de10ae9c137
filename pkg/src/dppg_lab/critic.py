"""Twin critics with Polyak targets, trained by TD in parameter or action space.

The regression loss is half the mean squared TD error, so one gradient step
follows ``delta * grad Q`` averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError
from .nn import AdamState, Mlp, adam_step, init_mlp, mlp_backward, mlp_forward, polyak
from .policy import PolicyHead, Spec, action_features, dirac_params_for_action


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    S2: np.ndarray
    R: np.ndarray
    done: np.ndarray
    U: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.R)


@dataclass
class TwinCritic:
    q1: Mlp
    q2: Mlp
    t1: Mlp
    t2: Mlp
    opt1: AdamState
    opt2: AdamState
    tau: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.t1.layer_sizes != self.q1.layer_sizes or self.t2.layer_sizes != self.q2.layer_sizes:
            raise ConfigError("target networks must match the live networks")

    @property
    def live(self):
        return (self.q1, self.q2)


def make_twin_critic(in_dim: int, hidden: int, rng: np.random.Generator, lr: float, tau: float = 0.005,
                     n_hidden: int = 2) -> TwinCritic:
    sizes = [in_dim] + [hidden] * n_hidden + [1]
    q1 = init_mlp(sizes, rng)
    q2 = init_mlp(sizes, rng)
    return TwinCritic(q1, q2, q1.copy(), q2.copy(), AdamState.for_net(q1, lr), AdamState.for_net(q2, lr), tau)


def q_values(net: Mlp, S, X) -> np.ndarray:
    return mlp_forward(net, np.concatenate([np.atleast_2d(S), np.atleast_2d(X)], axis=1))[0][:, 0]


def min_target(critic: TwinCritic, S2, X2) -> np.ndarray:
    return np.minimum(q_values(critic.t1, S2, X2), q_values(critic.t2, S2, X2))


def td_targets(critic: TwinCritic, batch: Batch, gamma: float, next_input: Callable) -> np.ndarray:
    """``R + gamma (1 - done) min_j Q_target_j(S', X')`` with ``X' = next_input(S')``.

    Skips the bootstrap when every transition is terminal or ``gamma`` is 0.
    """
    R = np.asarray(batch.R, dtype=np.float64)
    live = (1.0 - np.asarray(batch.done, dtype=np.float64)) * gamma
    if not np.any(live):
        y = R.copy()
    else:
        y = R + live * min_target(critic, batch.S2, next_input(batch.S2))
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite TD target")
    return y


def regress(critic: TwinCritic, S, X, y) -> float:
    """One Adam step of both live critics toward ``y`` at inputs ``(S, X)``; returns q1's loss."""
    inp = np.concatenate([np.atleast_2d(S), np.atleast_2d(X)], axis=1)
    losses = []
    for net, opt in ((critic.q1, critic.opt1), (critic.q2, critic.opt2)):
        q, tape = mlp_forward(net, inp)
        err = q[:, 0] - y
        grads, _ = mlp_backward(net, tape, err[:, None] / len(y), need_input_grad=False)
        adam_step(opt, net, grads)
        losses.append(0.5 * float(err @ err) / len(y))
    return losses[0]


def td_update_param(critic: TwinCritic, actor: PolicyHead, batch: Batch, gamma: float) -> float:
    """Standard parameter-space TD: regress at the stored parameters ``U``."""
    y = td_targets(critic, batch, gamma, actor.params)
    return regress(critic, batch.S, batch.U, y)


def interpolate_params(spec: Spec, U, A, omega) -> np.ndarray:
    """``omega U + (1 - omega) u_A``.

    Exact at both ends (``omega == 0`` gives ``u_A``, ``omega == 1`` gives
    ``U``) and when ``U == u_A``.
    """
    u_a = dirac_params_for_action(spec, A)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1, 1)
    return np.where(omega == 1.0, U, u_a + omega * (U - u_a))


def icl_update(critic: TwinCritic, actor: PolicyHead, batch: Batch, gamma: float, rng: np.random.Generator,
               omega=None) -> float:
    """Interpolated critic learning: regress at ``omega U + (1 - omega) u_A``.

    One ``omega ~ U[0, 1]`` is drawn per transition and shared by both
    critics; pass ``omega`` to pin it.
    """
    if omega is None:
        omega = rng.random(len(batch))
    omega = np.broadcast_to(np.asarray(omega, dtype=np.float64), (len(batch),))
    u_hat = interpolate_params(actor.spec, batch.U, batch.A, omega)
    y = td_targets(critic, batch, gamma, actor.params)
    return regress(critic, batch.S, u_hat, y)


def td_update_action(critic: TwinCritic, spec: Spec, next_action: Callable, batch: Batch, gamma: float) -> float:
    """Action-space TD; ``next_action(S')`` yields ``A'`` (indices for categorical specs)."""
    y = td_targets(critic, batch, gamma, lambda S2: action_features(spec, next_action(S2)))
    return regress(critic, batch.S, action_features(spec, batch.A), y)


def polyak_update(critic: TwinCritic, tau: Optional[float] = None) -> None:
    tau = critic.tau if tau is None else tau
    polyak(critic.t1, critic.q1, tau)
    polyak(critic.t2, critic.q2, tau)
