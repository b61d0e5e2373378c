from __future__ import annotations

import numpy as np

from ..conditioning import Layout
from ..numerics import Conv1d, GroupNorm, LayerNorm, Linear, Module, Tensor, as_tensor, multi_head_attention, ops
from ..numerics.ops import conv1d_output_length
from .layers import LearnedPositions, MoE, ResidualBlock, TemporalAttention, TimeEmbedding, activation


class Denoiser(Module):
    """Base for x0-predicting denoisers: ``forward(x_n [B, C, T], steps [B]) -> x0_hat``."""

    variant = ""

    def __init__(self, layout: Layout, config: dict, task_actions=None):
        self.layout = layout
        self.config = dict(config)
        self.task_actions = None if task_actions is None else [list(map(int, a)) for a in task_actions]

    def metadata(self) -> dict:
        return {"variant": self.variant, "layout": self.layout.to_dict(), "config": self.config,
                "task_actions": self.task_actions, "num_parameters": self.num_parameters()}

    def _check_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.layout.channels:
            raise ValueError(f"expected input [B, {self.layout.channels}, T], got {x.shape}")
        self.layout.horizon_index(x.shape[2])
        return x


def max_unet_depth(horizon: int) -> int:
    return horizon - 1


class TemporalUNet(Denoiser):
    """Residual temporal UNet; each level shrinks the horizon by one position.

    ``attention_heads`` adds self-attention after each level's residual pair.
    ``moe_site`` replicates either the attention blocks or the residual
    blocks once per supported horizon.
    """

    def __init__(self, layout: Layout, rng: np.random.Generator, widths=(32, 64, 128), groups: int = 8,
                 act: str = "mish", attention_heads: int | None = None, depth: int | None = None,
                 moe_site: str | None = None, moe_routing: str = "direct", zero_final: bool = False,
                 task_actions=None, variant: str = "unet3"):
        widths = tuple(int(w) for w in widths)
        limit = max_unet_depth(min(layout.horizons))
        if depth is None:
            depth = min(len(widths), limit)
        elif depth > limit:
            raise ValueError(f"horizon {min(layout.horizons)} supports at most {limit} downsample levels")
        if depth < 1 or depth > len(widths):
            raise ValueError(f"depth {depth} incompatible with widths {widths}")
        if moe_site not in (None, "attention", "convolution"):
            raise ValueError(f"moe_site must be 'attention' or 'convolution', got {moe_site!r}")
        if moe_site == "attention" and attention_heads is None:
            raise ValueError("attention-site MoE needs a variant with attention layers")
        config = {"widths": list(widths), "groups": groups, "act": act, "attention_heads": attention_heads,
                  "depth": depth, "moe_site": moe_site, "moe_routing": moe_routing, "zero_final": zero_final}
        super().__init__(layout, config, task_actions)
        self.variant = variant
        self.depth = depth
        widths = widths[:depth]
        time_dim = widths[0]
        C = layout.channels
        self.time_embed = TimeEmbedding(time_dim, rng)
        self._moe_site = moe_site

        def res(c_in, c_out):
            if moe_site == "convolution":
                return MoE([ResidualBlock(c_in, c_out, time_dim, groups, rng, act) for _ in layout.horizons],
                           layout.horizons, moe_routing, rng)
            return ResidualBlock(c_in, c_out, time_dim, groups, rng, act)

        def attn(c):
            if attention_heads is None:
                return None
            if moe_site == "attention":
                return MoE([TemporalAttention(c, attention_heads, groups, rng) for _ in layout.horizons],
                           layout.horizons, moe_routing, rng)
            return TemporalAttention(c, attention_heads, groups, rng)

        self.down_res1, self.down_res2, self.down_attn, self.down_sample = [], [], [], []
        c_prev = C
        for w in widths:
            self.down_res1.append(res(c_prev, w))
            self.down_res2.append(res(w, w))
            self.down_attn.append(attn(w))
            self.down_sample.append(Conv1d(w, w, 2, rng, stride=1, padding=0))
            c_prev = w
        self.mid_res1 = res(c_prev, c_prev)
        self.mid_attn = attn(c_prev)
        self.mid_res2 = res(c_prev, c_prev)
        self.up_sample, self.up_res1, self.up_res2, self.up_attn = [], [], [], []
        for w in reversed(widths):
            self.up_sample.append(Conv1d(c_prev, c_prev, 2, rng, stride=1, padding=1))
            self.up_res1.append(res(c_prev + w, w))
            self.up_res2.append(res(w, w))
            self.up_attn.append(attn(w))
            c_prev = w
        self.final_conv = Conv1d(c_prev, c_prev, 3, rng, padding=1)
        self.final_norm = GroupNorm(groups, c_prev)
        self.final_out = Conv1d(c_prev, C, 1, rng)
        if zero_final:
            self.final_out.weight.data = np.zeros_like(self.final_out.weight.data)
        self._act = act

    def _block(self, block, h, temb, T):
        if block is None:
            return h
        if isinstance(block, MoE):
            return block(h, temb, T)
        return block(h, temb)

    def temporal_lengths(self, T: int) -> list[int]:
        """Horizon length after each down and up sampling step."""
        lengths = [T]
        for _ in range(self.depth):
            lengths.append(conv1d_output_length(lengths[-1], 2, 1, 0))
        for _ in range(self.depth):
            lengths.append(conv1d_output_length(lengths[-1], 2, 1, 1))
        return lengths

    def forward(self, x, steps) -> Tensor:
        x = self._check_input(x)
        T = x.shape[2]
        if T - 1 < self.depth:
            raise ValueError(f"horizon {T} supports at most {T - 1} downsample levels, model has {self.depth}")
        temb = self.time_embed(steps)
        h = x
        skips = []
        for i in range(self.depth):
            h = self._block(self.down_res1[i], h, temb, T)
            h = self._block(self.down_res2[i], h, temb, T)
            h = self._block(self.down_attn[i], h, temb, T)
            skips.append(h)
            h = self.down_sample[i](h)
        h = self._block(self.mid_res1, h, temb, T)
        h = self._block(self.mid_attn, h, temb, T)
        h = self._block(self.mid_res2, h, temb, T)
        for i in range(self.depth):
            h = self.up_sample[i](h)
            h = ops.concat([h, skips.pop()], axis=1)
            h = self._block(self.up_res1[i], h, temb, T)
            h = self._block(self.up_res2[i], h, temb, T)
            h = self._block(self.up_attn[i], h, temb, T)
        h = activation(self._act)(self.final_norm(self.final_conv(h)))
        return self.final_out(h)


class DiTBlock(Module):
    """Pre-LN transformer block modulated by the time embedding (adaptive LN)."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width, affine=False)
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)
        self.norm2 = LayerNorm(width, affine=False)
        self.fc1 = Linear(width, 4 * width, rng)
        self.fc2 = Linear(4 * width, width, rng)
        self.modulation = Linear(width, 6 * width, rng)
        self.heads = heads
        self.width = width

    def forward(self, h: Tensor, temb: Tensor) -> Tensor:
        W = self.width
        mod = self.modulation(ops.silu(temb))
        B = mod.shape[0]
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            ops.slice(mod, 1, i * W, (i + 1) * W).reshape(B, 1, W) for i in range(6))
        a = self.norm1(h) * (scale1 + 1.0) + shift1
        qkv = self.qkv(a)
        q, k, v = (ops.slice(qkv, 2, i * W, (i + 1) * W) for i in range(3))
        h = h + gate1 * self.proj(multi_head_attention(q, k, v, self.heads))
        m = self.norm2(h) * (scale2 + 1.0) + shift2
        h = h + gate2 * self.fc2(ops.silu(self.fc1(m)))
        return h


class AttentionMoEBlock(Module):
    """Wraps a DiT block so the MoE wrapper can route it by horizon."""

    def __init__(self, block: DiTBlock):
        self.block = block

    def forward(self, h, temb):
        return self.block(h, temb)


class TransformerDenoiser(Denoiser):
    """Plan positions as tokens; time injected with adaptive layer norm."""

    def __init__(self, layout: Layout, rng: np.random.Generator, width: int = 128, layers: int = 4,
                 heads: int = 4, moe_site: str | None = None, moe_routing: str = "direct",
                 zero_final: bool = False, task_actions=None, variant: str = "transformer12"):
        if moe_site not in (None, "attention"):
            raise ValueError("the transformer supports only attention-site MoE")
        config = {"width": width, "layers": layers, "heads": heads, "moe_site": moe_site,
                  "moe_routing": moe_routing, "zero_final": zero_final}
        super().__init__(layout, config, task_actions)
        self.variant = variant
        C = layout.channels
        self.embed = Linear(C, width, rng)
        self.positions = LearnedPositions(max(layout.horizons), width, rng)
        self.time_embed = TimeEmbedding(width, rng)
        if moe_site == "attention":
            self.blocks = [MoE([AttentionMoEBlock(DiTBlock(width, heads, rng)) for _ in layout.horizons],
                               layout.horizons, moe_routing, rng) for _ in range(layers)]
        else:
            self.blocks = [DiTBlock(width, heads, rng) for _ in range(layers)]
        self.final_norm = LayerNorm(width, affine=False)
        self.final_modulation = Linear(width, 2 * width, rng)
        self.final_out = Linear(width, C, rng)
        if zero_final:
            self.final_out.weight.data = np.zeros_like(self.final_out.weight.data)
        self.width = width

    def forward(self, x, steps) -> Tensor:
        x = self._check_input(x)
        B, C, T = x.shape
        W = self.width
        temb = self.time_embed(steps)
        h = self.embed(x.transpose(0, 2, 1)) + self.positions(T)
        for block in self.blocks:
            h = block(h, temb, T) if isinstance(block, MoE) else block(h, temb)
        mod = self.final_modulation(ops.silu(temb))
        shift = ops.slice(mod, 1, 0, W).reshape(B, 1, W)
        scale = ops.slice(mod, 1, W, 2 * W).reshape(B, 1, W)
        h = self.final_norm(h) * (scale + 1.0) + shift
        return self.final_out(h).transpose(0, 2, 1)
