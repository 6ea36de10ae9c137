"""Distribution-parameter spaces and the maps around them.

Three parameter spaces are supported:

* :class:`CategoricalSpec` -- a probability vector per action dimension,
  produced from logits by a softmax.
* :class:`GaussSpec` -- ``[u_mu, u_sigma]`` in ``[-1, 1]^2`` per dimension,
  produced by ``tanh`` and mapped to a mean in ``[a_min, a_max]`` and a
  log-interpolated standard deviation in ``[sigma_min, sigma_max]``.
  Actions are ``clip(mu + sigma * eps, a_min, a_max)``.
* :class:`DiracSpec` -- the parameter *is* the action (a deterministic
  policy); used for DPG/TD3 and for the degenerate parameter space in which
  DPPG reduces to DPG.

Every function accepts a leading batch shape; the last axis holds the
flattened parameters (``dims * N`` or ``dims * 2`` or ``dims``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ContractViolation, EstimatorError
from .nn import Mlp, mlp_forward

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class CategoricalSpec:
    n: int
    dims: int = 1

    @property
    def param_dim(self) -> int:
        return self.n * self.dims

    @property
    def action_feature_dim(self) -> int:
        return self.n * self.dims


@dataclass(frozen=True)
class GaussSpec:
    a_min: float
    a_max: float
    sigma_min: float
    sigma_max: float
    dims: int = 1

    def __post_init__(self):
        if not self.a_min < self.a_max:
            raise ConfigError("need a_min < a_max")
        if not 0.0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 < sigma_min <= sigma_max")

    @property
    def param_dim(self) -> int:
        return 2 * self.dims

    @property
    def action_feature_dim(self) -> int:
        return self.dims


@dataclass(frozen=True)
class DiracSpec:
    a_min: float
    a_max: float
    dims: int = 1

    @property
    def param_dim(self) -> int:
        return self.dims

    @property
    def action_feature_dim(self) -> int:
        return self.dims


Spec = Union[CategoricalSpec, GaussSpec, DiracSpec]


def bandit_gauss_spec(a_min=-2.0, a_max=2.0, dims=1) -> GaussSpec:
    return GaussSpec(a_min, a_max, math.exp(-3.0), math.e, dims)


def control_gauss_spec(a_min=-1.0, a_max=1.0, dims=1) -> GaussSpec:
    return GaussSpec(a_min, a_max, 0.05, 0.2, dims)


# -- logits -> parameters -------------------------------------------------

def _softmax_blocks(logits, n):
    z = logits.reshape(logits.shape[:-1] + (-1, n))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits_to_params(spec: Spec, logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if isinstance(spec, CategoricalSpec):
        return _softmax_blocks(logits, spec.n).reshape(logits.shape)
    t = np.tanh(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
    if isinstance(spec, DiracSpec):
        return 0.5 * (t + 1.0) * (spec.a_max - spec.a_min) + spec.a_min
    return t


def params_logits_vjp(spec: Spec, logits, u, g_u) -> np.ndarray:
    """Pull a gradient with respect to ``u`` back to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    g_u = np.asarray(g_u, dtype=np.float64)
    if isinstance(spec, CategoricalSpec):
        p = u.reshape(u.shape[:-1] + (-1, spec.n))
        g = g_u.reshape(p.shape)
        out = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return out.reshape(logits.shape)
    inside = np.abs(logits) <= LOGIT_CLAMP
    if isinstance(spec, DiracSpec):
        t = (u - spec.a_min) / (spec.a_max - spec.a_min) * 2.0 - 1.0
        return g_u * 0.5 * (spec.a_max - spec.a_min) * (1.0 - t * t) * inside
    return g_u * (1.0 - u * u) * inside


# -- Gaussian moments -----------------------------------------------------

def _pairs(u):
    u = np.asarray(u, dtype=np.float64)
    return u.reshape(u.shape[:-1] + (-1, 2))


def params_to_moments(spec: GaussSpec, u) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, sigma)``, each of shape ``batch + (dims,)``."""
    pu = _pairs(u)
    if np.any(np.abs(pu) > 1.0):
        raise ContractViolation("Gaussian distribution parameters must lie in [-1, 1]")
    u_mu, u_sig = pu[..., 0], pu[..., 1]
    mu = (u_mu + 1.0) / 2.0 * (spec.a_max - spec.a_min) + spec.a_min
    lo, hi = math.log(spec.sigma_min), math.log(spec.sigma_max)
    sigma = np.exp((u_sig + 1.0) / 2.0 * (hi - lo) + lo)
    return mu, sigma


def moments_vjp(spec: GaussSpec, u, g_mu, g_sigma) -> np.ndarray:
    _, sigma = params_to_moments(spec, u)
    half_range = 0.5 * (spec.a_max - spec.a_min)
    half_log = 0.5 * (math.log(spec.sigma_max) - math.log(spec.sigma_min))
    out = np.stack([g_mu * half_range, g_sigma * sigma * half_log], axis=-1)
    return out.reshape(np.shape(u))


# -- sampling ----------------------------------------------------------------

def sample_action(spec: Spec, u, rng: np.random.Generator):
    """Draw ``A ~ f(.|u)``.

    Categorical draws are inverse-CDF with one uniform per dimension and
    return integer indices; Gaussian draws return clipped reals.
    """
    u = np.asarray(u, dtype=np.float64)
    if isinstance(spec, CategoricalSpec):
        p = u.reshape(u.shape[:-1] + (spec.dims, spec.n))
        cdf = np.cumsum(p, axis=-1)
        r = rng.random(p.shape[:-1])
        idx = (cdf <= r[..., None]).sum(axis=-1)
        return np.minimum(idx, spec.n - 1)
    if isinstance(spec, DiracSpec):
        return u.copy()
    eps = rng.standard_normal(u.shape[:-1] + (spec.dims,))
    return reparam_sample(spec, u, eps)


def reparam_sample(spec: Spec, u, eps) -> np.ndarray:
    """``clip(mu + sigma * eps, a_min, a_max)``."""
    if not isinstance(spec, GaussSpec):
        raise ContractViolation("reparameterised sampling needs a Gaussian spec")
    mu, sigma = params_to_moments(spec, u)
    return np.clip(mu + sigma * eps, spec.a_min, spec.a_max)


def reparam_vjp(spec: GaussSpec, u, eps, g_a) -> np.ndarray:
    """Gradient with respect to ``u`` of ``sum(g_a * reparam_sample(u, eps))``.

    Samples that land on the clip boundary contribute nothing.
    """
    if not isinstance(spec, GaussSpec):
        raise ContractViolation("reparameterised sampling needs a Gaussian spec")
    mu, sigma = params_to_moments(spec, u)
    pre = mu + sigma * eps
    live = (pre > spec.a_min) & (pre < spec.a_max)
    g = np.asarray(g_a, dtype=np.float64) * live
    return moments_vjp(spec, u, g, g * eps)


def log_prob(spec: CategoricalSpec, u, a) -> np.ndarray:
    """Joint log-probability of integer actions ``a`` (summed over dimensions)."""
    if not isinstance(spec, CategoricalSpec):
        raise ContractViolation("log_prob is only defined for categorical specs here")
    u = np.asarray(u, dtype=np.float64)
    p = u.reshape(u.shape[:-1] + (spec.dims, spec.n))
    a = np.asarray(a, dtype=np.int64).reshape(p.shape[:-1])
    pa = np.take_along_axis(p, a[..., None], axis=-1)[..., 0]
    if np.any(pa <= 0.0):
        raise EstimatorError("log-probability of an action with zero probability")
    return np.log(pa).sum(axis=-1)


def dirac_params_for_action(spec: Spec, a) -> np.ndarray:
    """Parameters ``u_A`` of the (near-)deterministic distribution at ``a``.

    Categorical: one-hot.  Gaussian: mean at ``a`` and ``u_sigma = -1``
    (i.e. ``sigma_min``); for the symmetric ranges used throughout this
    equals ``[2a / (a_max - a_min), -1]``.  Dirac: ``a`` itself.
    """
    if isinstance(spec, CategoricalSpec):
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        return np.eye(spec.n)[a].reshape(a.shape[:-1] + (spec.param_dim,))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if isinstance(spec, DiracSpec):
        return a.copy()
    if spec.a_min == -spec.a_max:
        u_mu = 2.0 * a / (spec.a_max - spec.a_min)
    else:
        u_mu = 2.0 * (a - spec.a_min) / (spec.a_max - spec.a_min) - 1.0
    u = np.stack([u_mu, -np.ones_like(u_mu)], axis=-1)
    return u.reshape(a.shape[:-1] + (spec.param_dim,))


def action_features(spec: Spec, a) -> np.ndarray:
    """Encoding of a realised action as critic input: one-hot or the raw value."""
    if isinstance(spec, CategoricalSpec):
        return dirac_params_for_action(spec, a)
    return np.asarray(a, dtype=np.float64)


def uniform_params(spec: Spec, rng: np.random.Generator, size=()) -> np.ndarray:
    """Exploration-phase parameters.

    Gaussian: uniform on ``[-1, 1]^2`` per dimension.  Categorical: softmax
    of standard-normal logits.  Dirac: a uniform action.
    """
    size = tuple(np.atleast_1d(size)) if size != () else ()
    if isinstance(spec, CategoricalSpec):
        return logits_to_params(spec, rng.standard_normal(size + (spec.param_dim,)))
    if isinstance(spec, DiracSpec):
        return rng.uniform(spec.a_min, spec.a_max, size + (spec.param_dim,))
    return rng.uniform(-1.0, 1.0, size + (spec.param_dim,))


def check_params(spec: Spec, u, tol=1e-9) -> bool:
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        return False
    if isinstance(spec, CategoricalSpec):
        p = u.reshape(u.shape[:-1] + (spec.dims, spec.n))
        return bool(np.all(p >= 0.0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))
    if isinstance(spec, DiracSpec):
        return bool(np.all((u >= spec.a_min) & (u <= spec.a_max)))
    return bool(np.all(np.abs(u) <= 1.0))


@dataclass
class PolicyHead:
    """An MLP whose outputs are logits for a parameter space."""

    net: Mlp
    spec: Spec

    def __post_init__(self):
        if self.net.n_out != self.spec.param_dim:
            raise ConfigError(
                f"policy net outputs {self.net.n_out} logits but spec needs {self.spec.param_dim}")

    def forward(self, states):
        """Returns ``(u, logits, tape)``."""
        logits, tape = mlp_forward(self.net, states)
        return logits_to_params(self.spec, logits), logits, tape

    def params(self, states) -> np.ndarray:
        return self.forward(states)[0]

    def copy(self) -> "PolicyHead":
        return PolicyHead(self.net.copy(), self.spec)
