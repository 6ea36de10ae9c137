"""The parameter-space MDP and exact oracles for its reward and values.

Acting with parameters ``u`` means the environment draws ``A ~ f(.|u)`` and
then steps the original task with ``A``.  Expectations over ``A`` are exact
sums for categorical parameters; for clipped Gaussians they split into a
Gauss-Legendre integral over the open interval plus the two point masses
the clip puts on ``a_min`` and ``a_max``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .envs import BimodalContinuousBandit, DiscretizedEnv, Env, KArmedBandit, PointMassMdp, StepResult
from .errors import ConfigError, InfeasibleError, PrecisionError
from .policy import CategoricalSpec, DiracSpec, Spec, params_to_moments, sample_action

MAX_JOINT_ACTIONS = 10_000


@dataclass(frozen=True)
class OracleConfig:
    quad_points: int = 256
    max_quad_points: int = 8192
    rel_tol: float = 1e-8          # stop doubling once successive estimates agree
    precision: float = 1e-6        # worst acceptable estimated error
    grid_points: int = 201         # point-mass value-iteration grid

    def __post_init__(self):
        if self.quad_points < 64:
            raise ConfigError("quadrature needs at least 64 points")


@dataclass
class ParamMdp:
    env: Env
    spec: Spec

    def __post_init__(self):
        if isinstance(self.spec, CategoricalSpec) != self.env.discrete:
            raise ConfigError("categorical parameters need a discrete environment and vice versa")
        if isinstance(self.spec, CategoricalSpec) and self.spec.n != self.env.n_actions:
            raise ConfigError("categorical arity does not match the environment")

    def reset(self, rng):
        return self.env.reset(rng)

    def step(self, state, u, rng):
        return param_step(self, state, u, rng)


def param_step(pmdp: ParamMdp, state, u, rng: np.random.Generator) -> tuple[StepResult, np.ndarray]:
    """Sample ``A ~ f(.|u)``, step the inner environment, return the result and ``A``."""
    a = sample_action(pmdp.spec, u, rng)
    return pmdp.env.step(state, a, rng), a


# -- quadrature rules ----------------------------------------------------------

@lru_cache(maxsize=32)
def _legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def action_rule(spec: Spec, u, n: int = 256):
    """Nodes and weights so that ``E_{A~f(.|u)}[g(A)] = sum_k W[..., k] g(nodes[k])``.

    For a clipped Gaussian the last two nodes are ``a_min`` and ``a_max``
    carrying the clip masses.  For categorical parameters the nodes are the
    joint action indices, shape ``(n_joint, dims)``.
    """
    u = np.asarray(u, dtype=np.float64)
    if isinstance(spec, CategoricalSpec):
        n_joint = spec.n ** spec.dims
        if n_joint > MAX_JOINT_ACTIONS:
            raise InfeasibleError(f"{n_joint} joint actions is too many to enumerate")
        p = u.reshape(u.shape[:-1] + (spec.dims, spec.n))
        nodes = np.array(list(product(range(spec.n), repeat=spec.dims)), dtype=np.int64)
        w = np.ones(u.shape[:-1] + (n_joint,))
        for d in range(spec.dims):
            w = w * p[..., d, nodes[:, d]]
        return nodes, w
    if isinstance(spec, DiracSpec):
        raise ConfigError("a Dirac parameter has no quadrature rule; evaluate at u directly")
    if spec.dims != 1:
        raise ConfigError("exact Gaussian oracles support one action dimension")
    mu, sigma = params_to_moments(spec, u)
    mu, sigma = mu[..., 0], sigma[..., 0]
    x, wx = _legendre(n)
    half = 0.5 * (spec.a_max - spec.a_min)
    mid = 0.5 * (spec.a_max + spec.a_min)
    a = mid + half * x
    z = (a - mu[..., None]) / sigma[..., None]
    dens = np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * sigma[..., None])
    w_in = wx * half * dens
    lo = ndtr((spec.a_min - mu) / sigma)
    hi = ndtr((mu - spec.a_max) / sigma)
    nodes = np.concatenate([a, [spec.a_min, spec.a_max]])
    w = np.concatenate([w_in, lo[..., None], hi[..., None]], axis=-1)
    return nodes, w


def expect(spec: Spec, u, g: Callable, oracle: OracleConfig = OracleConfig()) -> float:
    """``E_{A~f(.|u)}[g(A)]`` for a single parameter vector ``u``.

    ``g`` is called once with an array of actions and must return one value
    per action.  Gaussian rules double their size until two successive
    estimates agree to ``rel_tol``; :class:`PrecisionError` if the best
    attainable agreement is still worse than ``oracle.precision``.
    """
    if isinstance(spec, DiracSpec):
        return float(np.asarray(g(np.asarray(u, dtype=np.float64)[None, :])).ravel()[0])
    if isinstance(spec, CategoricalSpec):
        nodes, w = action_rule(spec, u)
        return float(w @ np.asarray(g(nodes), dtype=np.float64))
    n = oracle.quad_points
    nodes, w = action_rule(spec, u, n)
    prev = float(w @ g(nodes))
    while True:
        n *= 2
        nodes, w = action_rule(spec, u, n)
        cur = float(w @ g(nodes))
        err = abs(cur - prev)
        if err <= oracle.rel_tol * max(1.0, abs(cur)):
            return cur
        if n >= oracle.max_quad_points:
            if err > oracle.precision:
                raise PrecisionError(f"quadrature error estimate {err:.2e} exceeds {oracle.precision:.0e}")
            return cur
        prev = cur


# -- exact reward and values ---------------------------------------------------

def _position(state) -> float:
    return float(np.atleast_1d(state)[0])


def reward_fn(env: Env, state) -> Callable:
    """Vectorised ``a -> r(state, a)`` for the environments with known rewards."""
    if isinstance(env, KArmedBandit):
        return lambda a: env.reward(np.asarray(a).reshape(-1))
    if isinstance(env, BimodalContinuousBandit):
        return lambda a: env.reward(np.asarray(a).reshape(-1))
    if isinstance(env, (PointMassMdp, DiscretizedEnv)):
        s = _position(state)
        return lambda a: env.dynamics(s, np.asarray(a).reshape(-1))[1]
    raise ConfigError(f"no exact reward available for {type(env).__name__}")


def exact_param_reward(pmdp: ParamMdp, state, u, oracle: OracleConfig = OracleConfig()) -> float:
    """``r~(s, u) = E_{A~f(.|u)}[r(s, A)]``."""
    return expect(pmdp.spec, u, reward_fn(pmdp.env, state), oracle)


def exact_param_q(pmdp: ParamMdp, state, u, policy: Optional[Callable] = None,
                  oracle: OracleConfig = OracleConfig(), dp: "Optional[PointMassDp]" = None) -> float:
    """``q~_pi(s, u)``: the expected return of playing ``u`` once, then ``policy``.

    Bandits have horizon one so this is the parameter-space reward.  For the
    point mass the continuation value comes from finite-horizon value
    iteration on a uniform position grid (pass ``dp`` to reuse one).
    """
    if pmdp.env.is_bandit:
        return exact_param_reward(pmdp, state, u, oracle)
    if dp is None:
        if policy is None:
            raise ConfigError("a continuation policy is needed beyond horizon one")
        dp = PointMassDp(pmdp, policy, oracle)
    return dp.param_q(state, u)


# -- point-mass value iteration --------------------------------------------------

def _hat_weights(x, grid):
    """Linear-interpolation indices and weights of points ``x`` on a uniform grid."""
    g0, dx = grid[0], grid[1] - grid[0]
    pos = np.clip((x - g0) / dx, 0.0, len(grid) - 1.0)
    j = np.minimum(np.floor(pos).astype(np.int64), len(grid) - 2)
    frac = pos - j
    return j, frac


def _interp(values, j, frac):
    return values[j] * (1.0 - frac) + values[j + 1] * frac


class PointMassDp:
    """Finite-horizon policy evaluation on a uniform position grid.

    ``values[h]`` is the value with ``h`` steps left.  Two routes are kept:
    the parameter-space route propagates through the explicit kernel
    ``p~(s'|s, u)`` and reward ``r~(s, u)``; the action route evaluates
    ``q(s, a)`` on quadrature nodes and averages under ``f(.|u)``.
    """

    def __init__(self, pmdp: ParamMdp, policy: Callable, oracle: OracleConfig = OracleConfig(),
                 n_nodes: Optional[int] = None):
        env = pmdp.env
        if not isinstance(env, (PointMassMdp, DiscretizedEnv)):
            raise ConfigError("grid value iteration is implemented for the point mass only")
        self.pmdp = pmdp
        self.env = env
        self.gamma = env.gamma
        self.horizon = env.horizon
        self.n_nodes = n_nodes or oracle.quad_points
        self.grid = np.linspace(-1.0, 1.0, oracle.grid_points)
        self.policy = policy
        self.grid_params = np.asarray(policy(self.grid[:, None]), dtype=np.float64)
        self.nodes, self.weights = self._rule(self.grid_params)
        self.values = self._param_route()

    def _rule(self, u):
        spec = self.pmdp.spec
        if isinstance(spec, DiracSpec):
            return None, u
        return action_rule(spec, u, self.n_nodes)

    def _successors(self, s, u):
        """Next positions, rewards and weights for positions ``s`` under params ``u``."""
        nodes, w = self._rule(u)
        if nodes is None:
            s2, r = self.env.dynamics(s[:, None], w)
            return s2, r, np.ones_like(s2)
        acts = nodes if nodes.ndim == 1 else nodes[:, 0]
        s2, r = self.env.dynamics(s[:, None], acts[None, :])
        return s2, r, w

    def _param_route(self):
        s2, r, w = self._successors(self.grid, self.grid_params)
        G = len(self.grid)
        r_tilde = (w * r).sum(axis=1)
        j, frac = _hat_weights(s2, self.grid)
        kernel = np.zeros((G, G))
        rows = np.broadcast_to(np.arange(G)[:, None], j.shape)
        np.add.at(kernel, (rows, j), w * (1.0 - frac))
        np.add.at(kernel, (rows, j + 1), w * frac)
        self.kernel, self.r_tilde = kernel, r_tilde
        values = [np.zeros(G)]
        for _ in range(self.horizon):
            values.append(r_tilde + self.gamma * kernel @ values[-1])
        return values

    def action_route(self):
        """Values computed through ``q(s, a)`` at the action nodes."""
        s2, r, w = self._successors(self.grid, self.grid_params)
        j, frac = _hat_weights(s2, self.grid)
        values = [np.zeros(len(self.grid))]
        for _ in range(self.horizon):
            q = r + self.gamma * _interp(values[-1], j, frac)
            values.append((w * q).sum(axis=1))
        return values

    def _steps_left(self, state):
        t = int(np.atleast_1d(state)[1]) if np.size(state) > 1 else 0
        return self.horizon - t

    def value(self, state) -> float:
        h = self._steps_left(state)
        j, frac = _hat_weights(np.array([_position(state)]), self.grid)
        return float(_interp(self.values[h], j, frac)[0])

    def param_q(self, state, u) -> float:
        """``r~(s, u) + gamma * E[v(s')]`` with the continuation read off the grid."""
        h = self._steps_left(state)
        s = np.array([_position(state)])
        s2, r, w = self._successors(s, np.asarray(u, dtype=np.float64)[None, :])
        cont = self.values[h - 1]
        j, frac = _hat_weights(s2, self.grid)
        return float((w * (r + self.gamma * _interp(cont, j, frac))).sum())

    def action_q(self, state, a) -> np.ndarray:
        """Classical ``q(s, a)`` for an array of actions (indices if discretized)."""
        h = self._steps_left(state)
        s2, r = self.env.dynamics(_position(state), np.asarray(a))
        j, frac = _hat_weights(np.atleast_1d(s2), self.grid)
        return np.atleast_1d(r) + self.gamma * _interp(self.values[h - 1], j, frac)


# -- Proposition: parameter-space values equal classical values --------------------

DEFAULT_PROP1_TOL = {"karmed": 1e-12, "bimodal": 1e-6, "pointmass": 1e-3, "pointmass-disc7": 1e-3}


@dataclass
class Prop1Report:
    env: str
    max_abs_dev: float
    tolerance: float
    n_checks: int
    deviations: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_dev < self.tolerance)

    def to_dict(self) -> dict:
        return {"env": self.env, "max_abs_dev": float(self.max_abs_dev), "tolerance": float(self.tolerance),
                "pass": self.passed, "n_checks": self.n_checks}


def _classical_expectation(spec: Spec, u, q_of_a: Callable) -> float:
    """``E_{A~pi}[q(A)]`` computed without the parameter-space quadrature.

    Categorical: an explicit loop over joint actions.  Gaussian: adaptive
    QUADPACK over the open interval plus the two clip masses.
    """
    u = np.asarray(u, dtype=np.float64)
    if isinstance(spec, CategoricalSpec):
        p = u.reshape(spec.dims, spec.n)
        total = 0.0
        for joint in product(range(spec.n), repeat=spec.dims):
            prob = 1.0
            for d, a in enumerate(joint):
                prob *= p[d, a]
            total += prob * float(q_of_a(np.array(joint)))
        return total
    if isinstance(spec, DiracSpec):
        return float(q_of_a(u))
    mu, sigma = (float(x[0]) for x in params_to_moments(spec, u))
    dens = lambda a: np.exp(-0.5 * ((a - mu) / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)
    pts = [p for p in (mu - 3 * sigma, mu, mu + 3 * sigma) if spec.a_min < p < spec.a_max]
    with warnings.catch_warnings():
        # kinks from grid interpolation make QUADPACK report roundoff; the result is still far inside tolerance
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        inner, _ = integrate.quad(lambda a: dens(a) * float(q_of_a(np.array([a]))), spec.a_min, spec.a_max,
                                  points=pts or None, epsabs=1e-13, epsrel=1e-12, limit=500)
    lo = ndtr((spec.a_min - mu) / sigma)
    hi = ndtr((mu - spec.a_max) / sigma)
    return inner + lo * float(q_of_a(np.array([spec.a_min]))) + hi * float(q_of_a(np.array([spec.a_max])))


def check_prop1(pmdp: ParamMdp, policy: Callable, test_states, oracle: OracleConfig = OracleConfig(),
                test_params=None, tolerance: Optional[float] = None, env_id: str = "") -> Prop1Report:
    """Compare parameter-space values with their classical counterparts.

    Checks ``v~(s) == v(s)`` on every test state and ``q~(s, u) == E_A[q(s, A)]``
    for every test parameter.  Deviations beyond ``tolerance`` show up in the
    report; nothing is raised.
    """
    env_id = env_id or type(pmdp.env).__name__
    if tolerance is None:
        tolerance = DEFAULT_PROP1_TOL.get(env_id, 1e-6)
    test_states = [np.asarray(s, dtype=np.float64) for s in test_states]
    devs = {"v": 0.0, "q": 0.0}
    n = 0
    if pmdp.env.is_bandit:
        for s in test_states:
            u_pi = np.asarray(policy(pmdp.env.observe(s)[None, :]))[0]
            r = reward_fn(pmdp.env, s)
            tilde_v = exact_param_q(pmdp, s, u_pi, oracle=oracle)
            v = _classical_expectation(pmdp.spec, u_pi, lambda a: r(a)[0])
            devs["v"] = max(devs["v"], abs(tilde_v - v))
            n += 1
            for u in (test_params if test_params is not None else []):
                tilde_q = exact_param_q(pmdp, s, u, oracle=oracle)
                eq = _classical_expectation(pmdp.spec, u, lambda a: r(a)[0])
                devs["q"] = max(devs["q"], abs(tilde_q - eq))
                n += 1
    else:
        dp = PointMassDp(pmdp, policy, oracle)
        classical = dp.action_route()
        grid = dp.grid
        for s in test_states:
            h = dp._steps_left(s)
            j, frac = _hat_weights(np.array([_position(s)]), grid)
            tilde_v = float(_interp(dp.values[h], j, frac)[0])
            v = float(_interp(classical[h], j, frac)[0])
            devs["v"] = max(devs["v"], abs(tilde_v - v))
            n += 1
            cont = classical[h - 1]

            def q_classical(a, s=s, cont=cont):
                s2, r = pmdp.env.dynamics(_position(s), a.reshape(-1))
                jj, ff = _hat_weights(np.atleast_1d(s2), grid)
                return (r + dp.gamma * _interp(cont, jj, ff))[0]

            for u in (test_params if test_params is not None else []):
                tilde_q = dp.param_q(s, u)
                eq = _classical_expectation(pmdp.spec, u, q_classical)
                devs["q"] = max(devs["q"], abs(tilde_q - eq))
                n += 1
    return Prop1Report(env_id, max(devs.values()), tolerance, n, devs)


def prop1_suite(env_id: str, seed: int = 0, n_params: int = 4, oracle: OracleConfig = OracleConfig()) -> Prop1Report:
    """The standard Proposition-1 check for one of the built-in environments.

    Bandits: a random behaviour policy and ``n_params`` random test
    parameters.  Point mass: the feedback policy ``u = [clip(-s), -1]``,
    values at every grid position for several step counts, and parameter
    values at a handful of positions (the classical side integrates with
    adaptive quadrature, which is slow).
    """
    from .envs import make_env
    from .policy import bandit_gauss_spec, control_gauss_spec

    rng = np.random.default_rng(seed)
    env = make_env(env_id)
    if isinstance(env, KArmedBandit):
        spec = CategoricalSpec(env.n_actions)
        u_pi = rng.dirichlet(np.ones(spec.n))
        params = list(rng.dirichlet(np.ones(spec.n), size=n_params))
    elif isinstance(env, BimodalContinuousBandit):
        spec = bandit_gauss_spec(env.a_min, env.a_max)
        u_pi = rng.uniform(-1.0, 1.0, 2)
        params = list(rng.uniform(-1.0, 1.0, (n_params, 2)))
    elif isinstance(env, PointMassMdp):
        spec = control_gauss_spec(env.a_min, env.a_max)
        params = list(rng.uniform(-1.0, 1.0, (n_params, 2)))
    else:
        raise ConfigError(f"no Proposition-1 suite for {env_id!r}")
    pmdp = ParamMdp(env, spec)
    if env.is_bandit:
        policy = lambda S: np.tile(u_pi, (len(S), 1))
        return check_prop1(pmdp, policy, [env.reset(rng)], oracle, params, env_id=env_id)

    def policy(S):
        s = np.asarray(S, dtype=np.float64)[:, 0]
        return np.stack([np.clip(-s, -1.0, 1.0), -np.ones_like(s)], axis=1)

    grid = np.linspace(-1.0, 1.0, oracle.grid_points)
    v_states = [np.array([x, t]) for t in (0, env.horizon // 2, env.horizon - 1) for x in grid]
    q_states = [np.array([x, 0.0]) for x in rng.uniform(-1.0, 1.0, 3)]
    v_rep = check_prop1(pmdp, policy, v_states, oracle, None, env_id=env_id)
    q_rep = check_prop1(pmdp, policy, q_states, oracle, params, env_id=env_id)
    devs = {"v": max(v_rep.deviations["v"], q_rep.deviations["v"]), "q": q_rep.deviations["q"]}
    return Prop1Report(env_id, max(devs.values()), q_rep.tolerance, v_rep.n_checks + q_rep.n_checks, devs)
