"""Minimal feedforward networks with hand-rolled reverse-mode gradients.

All learned models in the package (denoiser, labelers, critics, actor) are
plain MLPs over flat float64 parameter vectors: affine layers with an
elementwise activation on every layer but the last.  Gradients are exact
reverse-mode, verified against central finite differences, and optimization
is standard bias-corrected Adam.  Everything is deterministic given a seed.

Checkpoint format (shared by every learned model): JSON with
{"version", "layer_sizes", "activation", "parameters": [f64]} plus
model-specific extra keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

CHECKPOINT_VERSION = 1

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z):
    phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * phi


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)),
    "gelu": (_gelu, _gelu_grad),
}


class GradientDivergedError(RuntimeError):
    """Non-finite gradient fed into the optimizer."""


def _layout(layer_sizes: Sequence[int]) -> tuple[list[tuple[int, int, int, int]], int]:
    """Per-layer (w_offset, fan_in, fan_out, b_offset) spans into the flat vector."""
    spans = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w_off = offset
        b_off = offset + fan_in * fan_out
        spans.append((w_off, fan_in, fan_out, b_off))
        offset = b_off + fan_out
    return spans, offset


@dataclass(frozen=True)
class Network:
    """MLP with activation on every layer except the last (linear head)."""

    layer_sizes: tuple[int, ...]
    activation: str
    parameters: np.ndarray

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        spans, count = _layout(self.layer_sizes)
        params = np.ascontiguousarray(self.parameters, dtype=float)
        if params.shape != (count,):
            raise ValueError(f"expected {count} parameters, got {params.shape}")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "parameters", params)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into the flat parameter vector, one pair per layer."""
        spans, _ = _layout(self.layer_sizes)
        out = []
        for w_off, fan_in, fan_out, b_off in spans:
            W = self.parameters[w_off:w_off + fan_in * fan_out].reshape(fan_in, fan_out)
            b = self.parameters[b_off:b_off + fan_out]
            out.append((W, b))
        return out

    def with_parameters(self, parameters: np.ndarray) -> "Network":
        return replace(self, parameters=parameters)


def init_network(layer_sizes: Sequence[int], activation: str, seed: int) -> Network:
    """Fan-in-scaled uniform init: W ~ U(-sqrt(3/fan_in), +sqrt(3/fan_in)), b = 0."""
    rng = np.random.default_rng(seed)
    spans, count = _layout(layer_sizes)
    params = np.zeros(count)
    for w_off, fan_in, fan_out, b_off in spans:
        bound = np.sqrt(3.0 / fan_in)
        params[w_off:w_off + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
    return Network(tuple(layer_sizes), activation, params)


# -- forward / backward ------------------------------------------------------


def _forward_cached(net: Network, X: np.ndarray) -> tuple[np.ndarray, list]:
    act, _ = _ACTIVATIONS[net.activation]
    weights = net.weights()
    caches = []          # (input to layer, pre-activation) per hidden layer
    h = X
    for W, b in weights[:-1]:
        z = h @ W + b
        caches.append((h, z))
        h = act(z)
    W, b = weights[-1]
    caches.append((h, None))
    return h @ W + b, caches


def forward_batch(net: Network, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValueError(f"expected (batch, {net.in_dim}) input, got {X.shape}")
    out, _ = _forward_cached(net, X)
    return out


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Single-input forward pass."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of length {net.in_dim}, got {x.shape}")
    return forward_batch(net, x[None, :])[0]


def _backward_cached(net: Network, caches: list, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, dact = _ACTIVATIONS[net.activation]
    weights = net.weights()
    spans, count = _layout(net.layer_sizes)
    grad = np.zeros(count)
    g = G
    for layer in range(len(weights) - 1, -1, -1):
        h_in, z = caches[layer]
        w_off, fan_in, fan_out, b_off = spans[layer]
        grad[w_off:w_off + fan_in * fan_out] = (h_in.T @ g).ravel()
        grad[b_off:b_off + fan_out] = g.sum(axis=0)
        g = g @ weights[layer][0].T
        if layer > 0:
            g = g * dact(caches[layer - 1][1])
    return grad, g


def backward_batch(net: Network, X: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients for a batch.

    Returns (param_grad, input_grad): param_grad is the gradient of
    sum_b <G[b], net(X[b])> with respect to the flat parameters; input_grad
    has one row per batch element.
    """
    X = np.asarray(X, dtype=float)
    G = np.asarray(G, dtype=float)
    if X.shape[0] != G.shape[0] or G.shape[1] != net.out_dim:
        raise ValueError("batch/upstream shape mismatch")
    _, caches = _forward_cached(net, X)
    return _backward_cached(net, caches, G)


def backward(net: Network, x: np.ndarray, upstream_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of <upstream_grad, net(x)> w.r.t. parameters and input."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream_grad, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of length {net.in_dim}, got {x.shape}")
    if upstream.shape != (net.out_dim,):
        raise ValueError(f"expected upstream of length {net.out_dim}, got {upstream.shape}")
    param_grad, input_grad = backward_batch(net, x[None, :], upstream[None, :])
    return param_grad, input_grad[0]


def finite_difference_param_grad(net: Network, x: np.ndarray,
                                 upstream_grad: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of <upstream, net(x)>; the verification oracle."""
    base = net.parameters
    grad = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = float(np.dot(upstream_grad, forward(net.with_parameters(bumped), x)))
        bumped[i] = base[i] - h
        down = float(np.dot(upstream_grad, forward(net.with_parameters(bumped), x)))
        grad[i] = (up - down) / (2.0 * h)
    return grad


# -- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 3.0e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameters(cls, n_params: int, learning_rate: float = 3.0e-5) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), learning_rate=learning_rate)


def adam_step(state: AdamState, params: np.ndarray,
              grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; raises on non-finite gradients."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state length mismatch")
    if not np.all(np.isfinite(grads)):
        raise GradientDivergedError("diverged")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, step=t)


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainBatch:
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets row counts differ")
        if self.weights is not None:
            if len(self.weights) != len(self.inputs):
                raise ValueError("weights row count differs")
            if np.any(np.asarray(self.weights) < 0):
                raise ValueError("weights must be non-negative")


def mse_loss_and_grad(net: Network, batch: TrainBatch) -> tuple[float, np.ndarray]:
    """Per-element mean squared error and its parameter gradient."""
    X = np.asarray(batch.inputs, dtype=float)
    Y = np.asarray(batch.targets, dtype=float)
    pred, caches = _forward_cached(net, X)
    resid = pred - Y
    if batch.weights is not None:
        resid = resid * np.asarray(batch.weights, dtype=float)[:, None]
    loss = float(np.mean(resid * (pred - Y)))
    G = 2.0 * resid / resid.size
    grad, _ = _backward_cached(net, caches, G)
    return loss, grad


def sgd_epoch(net: Network, state: AdamState, inputs: np.ndarray, targets: np.ndarray,
              batch_size: int, rng: np.random.Generator) -> tuple[Network, AdamState, float]:
    """One shuffled pass of minibatch Adam; returns mean per-batch loss."""
    n = len(inputs)
    order = rng.permutation(n)
    losses = []
    params = net.parameters
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        loss, grad = mse_loss_and_grad(net.with_parameters(params),
                                       TrainBatch(inputs[rows], targets[rows]))
        params, state = adam_step(state, params, grad)
        losses.append(loss)
    return net.with_parameters(params), state, float(np.mean(losses))


def fit_regression(inputs: np.ndarray, targets: np.ndarray, hidden: Sequence[int],
                   activation: str, seed: int, epochs: int, batch_size: int = 256,
                   learning_rate: float = 1e-3) -> tuple[Network, list[float]]:
    """Train an MLP regressor from scratch; returns the net and per-epoch losses."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    sizes = [inputs.shape[1], *hidden, targets.shape[1]]
    net = init_network(sizes, activation, seed)
    state = AdamState.for_parameters(net.parameters.size, learning_rate)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        net, state, loss = sgd_epoch(net, state, inputs, targets, batch_size, rng)
        history.append(loss)
    return net, history


# -- checkpoints -------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "parameters": net.parameters.tolist(),
    }


def network_from_dict(payload: dict) -> Network:
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return Network(tuple(payload["layer_sizes"]), payload["activation"],
                   np.asarray(payload["parameters"], dtype=float))


def save_checkpoint(net: Network, path: str, extra: dict | None = None) -> None:
    payload = network_to_dict(net)
    for key, value in (extra or {}).items():
        if key in payload:
            raise ValueError(f"extra key {key!r} collides with checkpoint fields")
        payload[key] = value
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> tuple[Network, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    net = network_from_dict(payload)
    extra = {k: v for k, v in payload.items()
             if k not in ("version", "layer_sizes", "activation", "parameters")}
    return net, extra
