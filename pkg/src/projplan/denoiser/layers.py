"""Building blocks shared by the denoiser variants."""
from __future__ import annotations

import math

import numpy as np

from ..numerics import Conv1d, GroupNorm, Linear, Module, Parameter, Tensor, multi_head_attention, ops
from ..numerics.nn import uniform_init


def sinusoidal_features(steps, dim: int) -> np.ndarray:
    """Interleaved [sin(n f_0), cos(n f_0), sin(n f_1), ...] with geometric frequencies."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    out = np.empty((len(steps), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def activation(name: str):
    if name == "mish":
        return ops.mish
    if name == "silu":
        return ops.silu
    raise ValueError(f"unknown activation {name!r}")


class TimeEmbedding(Module):
    """Sinusoidal features of the diffusion step followed by Linear-Mish-Linear."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, dim * 4, rng)
        self.fc2 = Linear(dim * 4, dim, rng)

    def forward(self, steps) -> Tensor:
        base = Tensor(sinusoidal_features(steps, self.dim).astype(self.fc1.weight.dtype))
        return self.fc2(ops.mish(self.fc1(base)))


class ResidualBlock(Module):
    """conv-GN-act, time injection, conv-GN-act, plus a (projected) skip."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int, rng: np.random.Generator,
                 act: str = "mish", kernel: int = 3):
        self.conv1 = Conv1d(c_in, c_out, kernel, rng, padding=kernel // 2)
        self.norm1 = GroupNorm(groups, c_out)
        self.time = Linear(time_dim, c_out, rng)
        self.conv2 = Conv1d(c_out, c_out, kernel, rng, padding=kernel // 2)
        self.norm2 = GroupNorm(groups, c_out)
        self.skip = Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None
        self.act = act

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        act = activation(self.act)
        h = act(self.norm1(self.conv1(x)))
        t = self.time(act(temb))
        h = h + t.reshape(t.shape[0], t.shape[1], 1)
        h = act(self.norm2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class TemporalAttention(Module):
    """Pre-norm multi-head self-attention across plan positions, residual."""

    def __init__(self, channels: int, heads: int, groups: int, rng: np.random.Generator):
        self.norm = GroupNorm(groups, channels)
        self.qkv = Linear(channels, 3 * channels, rng)
        self.out = Linear(channels, channels, rng)
        self.heads = heads

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        B, C, L = x.shape
        h = self.norm(x).transpose(0, 2, 1)
        qkv = self.qkv(h)
        q, k, v = (ops.slice(qkv, 2, i * C, (i + 1) * C) for i in range(3))
        a = self.out(multi_head_attention(q, k, v, self.heads))
        return x + a.transpose(0, 2, 1)


class MoE(Module):
    """One expert per supported horizon, routed by the input's horizon.

    ``direct`` routing runs only the matching expert; ``learned`` routing
    mixes all experts with softmax weights from a small gate MLP fed the
    horizon one-hot.
    """

    def __init__(self, experts: list[Module], horizons: tuple[int, ...], routing: str,
                 rng: np.random.Generator, gate_hidden: int = 16):
        if len(experts) != len(horizons):
            raise ValueError("MoE needs exactly one expert per supported horizon")
        if routing not in ("direct", "learned"):
            raise ValueError(f"routing must be 'direct' or 'learned', got {routing!r}")
        self.experts = list(experts)
        self.horizons = tuple(horizons)
        self.routing = routing
        if routing == "learned":
            self.gate1 = Linear(len(horizons), gate_hidden, rng)
            self.gate2 = Linear(gate_hidden, len(horizons), rng)

    def expert_index(self, horizon: int) -> int:
        if horizon not in self.horizons:
            raise ValueError(f"no expert for horizon {horizon}; experts cover {self.horizons}")
        return self.horizons.index(horizon)

    def gate(self, horizon: int) -> Tensor:
        onehot = np.zeros((1, len(self.horizons)), dtype=self.gate1.weight.dtype)
        onehot[0, self.expert_index(horizon)] = 1.0
        return ops.softmax(self.gate2(ops.mish(self.gate1(Tensor(onehot)))), axis=-1)

    def forward(self, x: Tensor, temb: Tensor, horizon: int) -> Tensor:
        if self.routing == "direct":
            return self.experts[self.expert_index(horizon)](x, temb)
        return moe_combine([e(x, temb) for e in self.experts], self.gate(horizon))


def moe_combine(expert_outputs: list[Tensor], gate: Tensor) -> Tensor:
    """Convex combination of expert outputs with weights ``gate`` of shape [1, E]."""
    out = None
    for e, y in enumerate(expert_outputs):
        w = ops.slice(gate, 1, e, e + 1).reshape((1,) * y.ndim)
        term = y * w
        out = term if out is None else out + term
    return out


class LearnedPositions(Module):
    def __init__(self, max_len: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(uniform_init(rng, (max_len, dim), dim))

    def forward(self, length: int) -> Tensor:
        return ops.slice(self.table, 0, 0, length)
