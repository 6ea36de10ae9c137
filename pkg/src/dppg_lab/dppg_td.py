"""On-policy DPPG with a linear TD critic on the point mass.

The actor is linear in the state before the squashing map:
``logits = [theta0 + theta1 * s, theta2]``, so ``u = tanh(logits)`` is a
Gaussian parameter pair.

The critic is linear in the parameter-space features
``phi(s, u) = E_{A ~ f(.|u)} psi(s, A)``, where ``psi`` is a small
quadratic basis in the unclipped next position ``s + gain * a``, scaled by
the fraction of steps left.  The expectation is
closed-form for a clipped Gaussian, which makes ``grad_u phi`` exact.
Because every sample is on-policy (``u = pi(s)``), the TD regression uses
the realised action ``psi(s, A)`` at the current step, whose spread around
``pi(s)`` is what identifies the action dependence; the bootstrap uses the
parameter-space features ``phi(s', pi(s'))``.  The actor ascends
``grad_theta pi(s) grad_u Q_w(s, pi(s))`` averaged over occupancy samples.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .envs import PointMassMdp, make_env
from .errors import ConfigError
from .param_mdp import OracleConfig, ParamMdp, PointMassDp
from .policy import GaussSpec, control_gauss_spec, logits_to_params, moments_vjp, params_logits_vjp, params_to_moments

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def clipped_gauss_moments(spec: GaussSpec, u):
    """``E[X], E[X^2]`` for ``X = clip(mu + sigma Z, a_min, a_max)`` and their ``(mu, sigma)`` partials.

    Returns ``(m1, m2, dm1, dm2)`` where ``dm*`` stacks ``d/dmu`` and
    ``d/dsigma`` on the last axis.  Shapes follow ``params_to_moments``.
    """
    mu, sig = params_to_moments(spec, u)
    a, b = spec.a_min, spec.a_max
    al, be = (a - mu) / sig, (b - mu) / sig
    Pa, Pb = ndtr(al), ndtr(be)
    pa, pb = _pdf(al), _pdf(be)
    mass = Pb - Pa
    ez = pa - pb                          # E[Z; alpha < Z < beta]
    ez2 = mass + al * pa - be * pb        # E[Z^2; alpha < Z < beta]
    m1 = a * Pa + b * (1.0 - Pb) + mu * mass + sig * ez
    m2 = a * a * Pa + b * b * (1.0 - Pb) + mu * mu * mass + 2.0 * mu * sig * ez + sig * sig * ez2
    dm1 = np.stack([mass, ez], axis=-1)
    dm2 = np.stack([2.0 * (mu * mass + sig * ez), 2.0 * (mu * ez + sig * ez2)], axis=-1)
    return m1, m2, dm1, dm2


# -- features ------------------------------------------------------------------------

FEATURE_NAMES = ("1", "tau", "x2", "tau*x2")


def _tau(t, horizon):
    return (horizon - np.asarray(t, dtype=np.float64)) / horizon


def action_features(s, t, a, horizon: int, gain: float) -> np.ndarray:
    """``psi(s, a)`` for a realised action; ``x = s + gain * a`` is the unclipped next position."""
    s = np.asarray(s, dtype=np.float64)
    x = s + gain * np.asarray(a, dtype=np.float64)
    tau = _tau(t, horizon)
    return np.stack([np.ones_like(s), tau, x * x, tau * x * x], axis=-1)


@dataclass
class LinearCritic:
    """``Q_w(s, u) = phi(s, u) . w`` with ``phi = E_{A~f(.|u)} psi(s, A)``.

    ``E[x^2] = s^2 + 2 g s E[A] + g^2 E[A^2]`` so the features stay closed-form.
    """

    spec: GaussSpec
    horizon: int
    gain: float
    w: np.ndarray = None

    def __post_init__(self):
        if self.w is None:
            self.w = np.zeros(len(FEATURE_NAMES))

    @property
    def dim(self) -> int:
        return len(FEATURE_NAMES)

    def _ex2(self, s, u):
        m1, m2, dm1, dm2 = clipped_gauss_moments(self.spec, u)
        s = np.asarray(s, dtype=np.float64)
        g = self.gain
        ex2 = s * s + 2.0 * g * s * m1[..., 0] + g * g * m2[..., 0]
        d_ex2 = 2.0 * g * s[..., None] * dm1[..., 0, :] + g * g * dm2[..., 0, :]
        return s, ex2, d_ex2

    def features(self, s, t, u) -> np.ndarray:
        s, ex2, _ = self._ex2(s, u)
        tau = _tau(t, self.horizon)
        return np.stack([np.ones_like(s), tau, ex2, tau * ex2], axis=-1)

    def value(self, s, t, u) -> np.ndarray:
        return self.features(s, t, u) @ self.w

    def grad_u(self, s, t, u) -> np.ndarray:
        """``grad_u Q_w(s, u)``, shape ``batch + (2,)``."""
        _, _, d_ex2 = self._ex2(s, u)
        c = self.w[2] + self.w[3] * _tau(t, self.horizon)
        g = np.asarray(c)[..., None] * d_ex2
        return moments_vjp(self.spec, u, g[..., :1], g[..., 1:])


# -- actor ---------------------------------------------------------------------------

def linear_logits(theta, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.stack([theta[0] + theta[1] * s, np.full_like(s, theta[2])], axis=-1)


def linear_policy(spec: GaussSpec, theta, s) -> np.ndarray:
    return logits_to_params(spec, linear_logits(theta, s))


def actor_vjp(spec: GaussSpec, theta, s, g_u) -> np.ndarray:
    """``sum_j grad_theta pi(s_j)^T g_u[j]``."""
    logits = linear_logits(theta, s)
    u = logits_to_params(spec, logits)
    g_l = params_logits_vjp(spec, logits, u, g_u)
    s = np.asarray(s, dtype=np.float64)
    return np.array([g_l[:, 0].sum(), (g_l[:, 0] * s).sum(), g_l[:, 1].sum()])


# -- occupancy sampling and the exact objective --------------------------------------

def sample_occupancy(env: PointMassMdp, spec: GaussSpec, theta, m: int, rng: np.random.Generator):
    """``m`` states from the normalised discounted occupancy of the linear policy.

    The step index is drawn with probability proportional to ``gamma^t``
    over ``t < horizon`` (inverse CDF of the truncated geometric law); each
    trajectory then starts from ``d0`` and follows the policy for that many
    steps.  Trajectories are advanced together; returns positions and step
    indices.
    """
    H, g = env.horizon, env.gamma
    stop = np.floor(np.log1p(-rng.random(m) * (1.0 - g**H)) / np.log(g)).astype(np.int64)
    stop = np.minimum(stop, H - 1)
    s = rng.uniform(-1.0, 1.0, m)
    t = np.zeros(m, dtype=np.int64)
    for k in range(int(stop.max())):
        idx = np.flatnonzero(stop > k)
        u = linear_policy(spec, theta, s[idx])
        mu, sig = params_to_moments(spec, u)
        a = np.clip(mu[:, 0] + sig[:, 0] * rng.standard_normal(len(idx)), env.a_min, env.a_max)
        s[idx], _ = env.dynamics(s[idx], a)
        t[idx] += 1
    return s, t


def exact_objective(env: PointMassMdp, spec: GaussSpec, theta, oracle: Optional[OracleConfig] = None) -> float:
    """``J(theta) = E_{s0 ~ U[-1, 1]} v(s0)`` by grid value iteration."""
    oracle = oracle or OracleConfig(quad_points=64, grid_points=101)
    pmdp = ParamMdp(env, spec)
    dp = PointMassDp(pmdp, lambda S: linear_policy(spec, theta, S[:, 0]), oracle)
    v = dp.values[env.horizon]
    return float(np.trapezoid(v, dp.grid) / (dp.grid[-1] - dp.grid[0]))


def exact_gradient(env, spec, theta, h: float = 1e-3, oracle: Optional[OracleConfig] = None) -> np.ndarray:
    """Central finite differences of :func:`exact_objective`."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (exact_objective(env, spec, theta + e, oracle) - exact_objective(env, spec, theta - e, oracle)) / (2 * h)
    return g


W_LIMIT = 1e6   # far beyond any fixed point with |r| <= 1 and bounded features

# -- the algorithm -------------------------------------------------------------------

@dataclass
class DppgTdLog:
    seed: int
    steps: int
    theta: np.ndarray                 # (steps + 1, 3)
    w: np.ndarray                     # (steps + 1, d)
    est_grad_sq: np.ndarray           # ||critic-based gradient estimate||^2 per step
    td_norm: np.ndarray               # RMS TD error per step
    true_grad_sq: np.ndarray = None   # ||grad J(theta_t)||^2, when tracked
    diagnostic: str = ""

    CSV_COLUMNS = ("step", "grad_sq_true", "grad_sq_est", "td_rms", "theta0", "theta1", "theta2")

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for k in range(self.steps):
            true = "" if self.true_grad_sq is None else repr(float(self.true_grad_sq[k]))
            th = self.theta[min(k, len(self.theta) - 1)]
            lines.append(",".join([str(k), true, repr(float(self.est_grad_sq[k])), repr(float(self.td_norm[k]))]
                                  + [repr(float(v)) for v in th]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def min_so_far(self, which: str = "true") -> np.ndarray:
        trace = self.true_grad_sq if which == "true" else self.est_grad_sq
        if trace is None:
            raise ConfigError("true gradients were not tracked")
        return np.minimum.accumulate(trace)


def run_dppg_td_linear(env_id: str = "pointmass", config=None, steps: int = 500, seed: int = 0,
                       theta0=None, track_true_gradient: bool = True, zero_reward: bool = False,
                       oracle: Optional[OracleConfig] = None) -> DppgTdLog:
    """Alternate one batched TD step on ``w`` with one actor step on ``theta``.

    ``config`` supplies ``alpha_w``, ``alpha_theta`` and ``m_batch``.  With
    ``zero_reward`` every reward is replaced by 0.
    """
    from .agents import AgentConfig
    config = config or AgentConfig()
    env = make_env(env_id)
    if not isinstance(env, PointMassMdp):
        raise ConfigError("linear DPPG-TD is defined for the continuous point mass")
    spec = control_gauss_spec(env.a_min, env.a_max)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    theta = np.asarray(theta0, dtype=np.float64).copy() if theta0 is not None else rng.normal(0.0, 0.1, 3)
    critic = LinearCritic(spec, env.horizon, env.gain)
    M, aw, at = config.m_batch, config.alpha_w, config.alpha_theta
    thetas, ws = [theta.copy()], [critic.w.copy()]
    est, tdn, true = np.zeros(steps), np.zeros(steps), np.zeros(steps) if track_true_gradient else None
    log = DppgTdLog(seed, steps, None, None, est, tdn, true)
    for k in range(steps):
        if track_true_gradient:
            g = exact_gradient(env, spec, theta, oracle=oracle)
            true[k] = g @ g
        # critic: M on-policy transitions from occupancy states
        s, t = sample_occupancy(env, spec, theta, M, rng)
        u = linear_policy(spec, theta, s)
        mu, sig = params_to_moments(spec, u)
        a = np.clip(mu[:, 0] + sig[:, 0] * rng.standard_normal(M), env.a_min, env.a_max)
        s2, r = env.dynamics(s, a)
        if zero_reward:
            r = np.zeros_like(r)
        t2 = t + 1
        live = (t2 < env.horizon).astype(np.float64)
        x = action_features(s, t, a, env.horizon, env.gain)
        x2 = critic.features(s2, np.minimum(t2, env.horizon - 1), linear_policy(spec, theta, s2))
        delta = r + env.gamma * live * (x2 @ critic.w) - x @ critic.w
        w_new = critic.w + aw / M * (delta @ x)
        # actor: M fresh occupancy states, gradient through the current critic
        s_a, t_a = sample_occupancy(env, spec, theta, M, rng)
        g_u = critic.grad_u(s_a, t_a, linear_policy(spec, theta, s_a))
        g_theta = actor_vjp(spec, theta, s_a, g_u) / M
        est[k] = g_theta @ g_theta
        tdn[k] = np.sqrt(np.mean(delta * delta))
        theta = theta + at * g_theta
        critic.w = w_new
        if not (np.all(np.isfinite(critic.w)) and np.all(np.isfinite(theta))) or np.abs(critic.w).max() > W_LIMIT:
            log.diagnostic = f"diverged at step {k}"
            log.steps = k + 1
            break
        thetas.append(theta.copy())
        ws.append(critic.w.copy())
    log.theta, log.w = np.array(thetas), np.array(ws)
    return log
