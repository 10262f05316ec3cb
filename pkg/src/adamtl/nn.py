"""Parameter containers and the few layers the model is built from."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import RngState, Tensor


class Module:
    """Walks its attributes (and lists/dicts of them) to find parameters."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise nx.ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = np.zeros_like(p.data) if flag else None


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=nx.default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngState, bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(rng.normal((d_in, d_out)) * std)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return nx.linear(x, self.weight, self.bias)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x):
        return nx.layer_norm(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: RngState):
        std = 1.0 / math.sqrt(c_in * k * k)
        self.weight = param(rng.normal((c_out, c_in, k, k)) * std)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x, padding_mode: str = "zeros"):
        return nx.conv2d(x, self.weight, self.bias, padding_mode=padding_mode)

    @property
    def shape(self) -> tuple:
        return self.weight.shape
