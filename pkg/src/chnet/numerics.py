"""Dense float64 numerics.

Small feed-forward networks with hand-written reverse-mode gradients, an Adam
optimizer, Xavier initialisation, seeded random streams and the probability
primitives (reparameterised Gaussian sampling, KL to the standard normal,
Gaussian and Bernoulli negative log-likelihoods) used by the models.

Every reduction in this module runs in a fixed order so repeated runs with the
same seeds are bit-identical.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, InvalidArgument, NumericalError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

def _stream_key(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise InvalidArgument(f"stream keys must be non-negative, got {key}")
    return int(key)


@dataclass(frozen=True)
class Rng:
    """A master seed plus a stream path.

    ``Rng(seed).child("split")`` and ``Rng(seed).child("init")`` give independent
    generators, so adding draws to one stage never shifts another.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise InvalidArgument(f"seed must be non-negative, got {self.seed}")

    def child(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_stream_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(seq))


# --------------------------------------------------------------------------
# initialisation and feed-forward networks
# --------------------------------------------------------------------------

def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); shape [fan_out, fan_in]."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgument(f"fan dimensions must be >= 1, got ({fan_in}, {fan_out})")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


_ACTIVATIONS = ("tanh", "identity")


@dataclass
class Mlp:
    """Weights are stored [out, in]; tanh on hidden layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    def __post_init__(self) -> None:
        if self.output_activation not in _ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgument("an Mlp needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgument(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgument(f"layer {i} input {w.shape[1]} does not chain "
                                      f"from output {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator,
             output_activation: str = "identity", zero_last: bool = False) -> "Mlp":
        """Xavier weights, zero biases. ``sizes`` = [in, hidden..., out]."""
        if len(sizes) < 2:
            raise InvalidArgument("sizes needs an input and an output dimension")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = xavier_init(fan_in, fan_out, rng)
            if zero_last and i == len(sizes) - 2:
                w = np.zeros_like(w)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, output_activation)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output_activation)

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(w) for w in self.weights],
                   [np.zeros_like(b) for b in self.biases], self.output_activation)


@dataclass
class MlpTape:
    activations: list[np.ndarray]  # layer inputs followed by the final output
    squeeze: bool


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Forward pass for a vector ``[in]`` or a batch ``[n, in]``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise InvalidArgument(f"input shape {x.shape} does not match fan-in {params.in_dim}")
    acts = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last or params.output_activation == "tanh":
            h = np.tanh(h)
        acts.append(h)
    out = h[0] if squeeze else h
    return out, MlpTape(acts, squeeze)


def mlp_backward(params: Mlp, tape: MlpTape,
                 output_grad: np.ndarray) -> tuple[np.ndarray, Mlp]:
    """Reverse pass: gradients of ``sum(output_grad * output)``.

    Returns the input gradient (same shape as the forward input) and an ``Mlp``
    holding parameter gradients.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.activations[-1].shape:
        raise InvalidArgument(f"output_grad shape {g.shape} does not match "
                              f"output {tape.activations[-1].shape}")
    n = len(params.weights)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i < n - 1 or params.output_activation == "tanh":
            a = tape.activations[i + 1]
            g = g * (1.0 - a * a)
        dws[i] = g.T @ tape.activations[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grad_in = g[0] if tape.squeeze else g
    return grad_in, Mlp(dws, dbs, params.output_activation)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class Adam:
    """Adam with bias correction; minimises. eps is added after the square root.

    ``weight_decay`` is coupled L2 (added to the gradient before the moments).
    Parameters are updated in place; read-only (frozen) arrays raise
    ``ContractViolation``.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise InvalidArgument(f"learning rate must be positive, got {self.lr}")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        if params.keys() != grads.keys():
            raise InvalidArgument("parameter and gradient names differ")
        for name in params:
            if params[name].shape != grads[name].shape:
                raise InvalidArgument(f"{name}: grad shape {grads[name].shape} "
                                      f"!= param shape {params[name].shape}")
            if not np.isfinite(grads[name]).all():
                raise NumericalError(f"non-finite gradient for {name}")
            if not params[name].flags.writeable:
                raise ContractViolation(f"{name} is frozen")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# probability primitives
# --------------------------------------------------------------------------

def clamp_logvar(logvar: np.ndarray) -> np.ndarray:
    return np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu: np.ndarray, logvar: np.ndarray,
                   rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> np.ndarray:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I); logvar clamped to [-10, 10].

    Pass ``eps`` to reuse a noise draw (e.g. for gradient checks).
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise InvalidArgument(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if eps is None:
        if rng is None:
            raise InvalidArgument("reparameterize needs rng or eps")
        eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * clamp_logvar(logvar)) * eps


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)) in nats."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise InvalidArgument(f"mu {mu.shape} and logvar {logvar.shape} differ")
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def gaussian_nll(x, mu, var: float):
    if not var > 0:
        raise InvalidArgument(f"variance must be positive, got {var}")
    d = np.asarray(x, dtype=np.float64) - mu
    out = 0.5 * np.log(2.0 * np.pi * var) + d * d / (2.0 * var)
    return float(out) if np.ndim(out) == 0 else out


def bernoulli_nll_from_logit(x, logit):
    """-[x log sigmoid(l) + (1 - x) log(1 - sigmoid(l))], via softplus(l) - x*l."""
    logit = np.asarray(logit, dtype=np.float64)
    out = np.logaddexp(0.0, logit) - np.asarray(x, dtype=np.float64) * logit
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(x):
    return expit(x)


def param_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over tensor names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
