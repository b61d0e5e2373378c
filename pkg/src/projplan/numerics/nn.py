"""Minimal module/parameter system and the layers the denoisers are built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, as_tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data: np.ndarray):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, op="param")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Parameters and submodules are discovered from instance attributes in
    assignment order, which fixes the parameter naming and ordering."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel), c_in * kernel))
        self.bias = Parameter(np.zeros(c_out, dtype=DEFAULT_DTYPE))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise ShapeError(f"group count {groups} does not divide channel dimension {channels}")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=DEFAULT_DTYPE)) if affine else None
        self.bias = Parameter(np.zeros(dim, dtype=DEFAULT_DTYPE)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention; q, k, v are [B, T, D] with D split into heads."""
    B, T, D = q.shape
    if D % heads:
        raise ShapeError(f"attention width {D} not divisible by head count {heads}")
    dh = D // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    out = ops.matmul(attn, vh)
    return out.transpose(0, 2, 1, 3).reshape(B, T, D)


class MLP(Module):
    """Feedforward stack with a shared hidden activation."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "mish"):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        act = ops.mish if self.activation == "mish" else ops.silu
        x = as_tensor(x)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x
