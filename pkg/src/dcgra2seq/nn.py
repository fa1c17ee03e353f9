"""Minimal layers and the Adam optimiser on top of :mod:`dcgra2seq.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container. Trainable tensors and child modules are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters()}
        state.update({k: v for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = state[k].astype(p.dtype, copy=True)
        for k, b in bufs.items():
            b[...] = state[k]

    def to(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
                    setattr(m, name, value.astype(dtype))
                elif isinstance(value, Tensor) and not value.requires_grad:
                    value.data = value.data.astype(dtype)
        return self


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = math.sqrt(6.0 / (n_in + n_out))
        self.weight = _param(rng.uniform(-bound, bound, (n_in, n_out)), dtype)
        self.bias = _param(np.zeros(n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel)), dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, dtype=np.float32):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.update_stats = True

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum,
                           update_stats=self.update_stats)


class LSTMCell(Module):
    """Single-layer LSTM cell with fused gate weights (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0,
                 dtype=np.float32):
        bound = math.sqrt(6.0 / (n_in + hidden + 4 * hidden))
        self.weight = _param(rng.uniform(-bound, bound, (n_in + hidden, 4 * hidden)), dtype)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = forget_bias
        self.bias = _param(bias, dtype)
        self.hidden = hidden

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        gates = T.concat([x, h], axis=-1) @ self.weight + self.bias
        H = self.hidden
        i = T.sigmoid(gates[..., :H])
        f = T.sigmoid(gates[..., H:2 * H])
        g = T.tanh(gates[..., 2 * H:3 * H])
        o = T.sigmoid(gates[..., 3 * H:])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c


class Adam:
    """Adam with an externally controlled learning rate and optional global-norm clipping."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict[Tensor, Tensor]) -> float:
        gs = [grads[p].data if p in grads else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(float(np.sum([np.sum(g.astype(np.float64) ** 2) for g in gs])))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm
