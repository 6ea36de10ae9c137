"""Dense ReLU MLPs with a hand-written reverse pass and Adam.

All parameters of a network live in one flat float64 vector; the per-layer
weight matrices and bias vectors are views into it.  Gradients use the same
flat layout, which keeps Adam, Polyak averaging and finite-difference checks
down to single vector operations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError


def _layout(layer_sizes: Sequence[int]) -> list[tuple[int, int, int, int]]:
    # (w_start, w_end, b_end, fan_in) per layer; biases follow their weights
    out = []
    pos = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w_end = pos + n_in * n_out
        b_end = w_end + n_out
        out.append((pos, w_end, b_end, n_in))
        pos = b_end
    return out


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass
class Mlp:
    """ReLU on hidden layers, identity on the output layer.

    ``weights[k]`` has shape ``(layer_sizes[k], layer_sizes[k+1])`` so a batch
    of row vectors is propagated as ``x @ W + b``.
    """

    layer_sizes: tuple[int, ...]
    params: np.ndarray
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigError(f"invalid layer sizes {self.layer_sizes}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_sizes),):
            raise ConfigError(
                f"expected {n_params(self.layer_sizes)} parameters, got {self.params.shape}")
        self.weights, self.biases = self.split(self.params)

    def split(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-layer views of any vector laid out like ``params``."""
        ws, bs = [], []
        for (start, w_end, b_end, n_in), n_out in zip(_layout(self.layer_sizes), self.layer_sizes[1:]):
            ws.append(flat[start:w_end].reshape(n_in, n_out))
            bs.append(flat[w_end:b_end])
        return ws, bs

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.params.copy())

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, scheme: str = "fan_in") -> Mlp:
    """Uniform fan-in initialisation.

    ``"fan_in"`` draws weights and biases from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    (the usual ``Linear`` default); ``"he"`` draws weights with bound
    ``sqrt(6 / fan_in)`` and zeroes the biases.  With ``"he"`` a fresh softmax
    head is often already close to a vertex.
    """
    if scheme not in ("fan_in", "he"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    params = np.zeros(n_params(layer_sizes))
    net = Mlp(tuple(layer_sizes), params)
    for w, b in zip(net.weights, net.biases):
        fan_in = w.shape[0]
        if scheme == "he":
            bound = np.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
    return net


def zeros_like(net: Mlp) -> np.ndarray:
    return np.zeros_like(net.params)


@dataclass
class Tape:
    inputs: list[np.ndarray]     # input to each layer
    masks: list[np.ndarray]      # ReLU masks of hidden layers
    layer_sizes: tuple[int, ...]
    squeeze: bool


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ConfigError(f"input shape {x.shape} does not match layer size {net.n_in}")
    inputs, masks = [], []
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w
        z += b
        if k < last:
            mask = z > 0.0
            z *= mask
            masks.append(mask)
        h = z
    out = h[0] if squeeze else h
    return out, Tape(inputs, masks, net.layer_sizes, squeeze)


def mlp_backward(net: Mlp, tape: Tape, output_grad, need_input_grad: bool = True,
                 need_param_grads: bool = True):
    """Vector-Jacobian product of the forward pass recorded in ``tape``.

    Returns ``(param_grads, input_grad)``: the gradients of
    ``sum(output_grad * output)`` with respect to the flat parameter vector
    and the input.  Either is None when not requested.
    """
    if tape.layer_sizes != net.layer_sizes:
        raise RuntimeError("tape was recorded on a network of different shape")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    batch = tape.inputs[0].shape[0]
    if g.shape != (batch, net.n_out):
        raise RuntimeError(f"output_grad shape {g.shape} does not match tape ({batch}, {net.n_out})")
    grads = np.empty_like(net.params) if need_param_grads else None
    if grads is not None:
        gw, gb = net.split(grads)
    for k in range(len(net.weights) - 1, -1, -1):
        if grads is not None:
            np.matmul(tape.inputs[k].T, g, out=gw[k])
            g.sum(axis=0, out=gb[k])
        if k == 0 and not need_input_grad:
            return grads, None
        g = g @ net.weights[k].T
        if k > 0:
            g = g * tape.masks[k - 1]
    input_grad = g[0] if tape.squeeze else g
    return grads, input_grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_net(cls, net: Mlp, lr: float, **kw) -> "AdamState":
        return cls(np.zeros_like(net.params), np.zeros_like(net.params), lr, **kw)


def adam_step(state: AdamState, net: Mlp, grads: np.ndarray) -> Mlp:
    """One bias-corrected Adam descent step; ``net`` is updated in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != net.params.shape:
        raise ConfigError(f"gradient shape {grads.shape} != parameter shape {net.params.shape}")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient passed to Adam")
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    denom = np.sqrt(state.v / bc2)
    denom += state.eps
    net.params -= (state.lr / bc1) * state.m / denom
    return net


def polyak(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    if tau == 1.0:
        target.params[...] = source.params
    elif tau != 0.0:
        target.params *= 1.0 - tau
        target.params += tau * source.params
