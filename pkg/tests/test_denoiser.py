from __future__ import annotations

import numpy as np
import pytest

from projplan.conditioning import Layout
from projplan.denoiser import (PRESETS, VARIANTS, MoE, ResidualBlock, TimeEmbedding, build_denoiser, denoise,
                               load_denoiser, moe_combine, save_denoiser, sinusoidal_features)
from projplan.numerics import Tensor, backward, ops
from projplan.numerics.ops import conv1d_output_length

from conftest import close, component_derivative

JOINT = Layout(n_actions=6, obs_dim=4, n_tasks=3, horizons=(3, 4, 5, 6), task_mode="concat",
               horizon_mode="concat")


def small(variant, layout=JOINT, **kw):
    sizes = {"unet3": {"widths": (8, 16, 16), "groups": 4}, "unet_attn2": {"widths": (8, 16), "groups": 4,
                                                                          "attention_heads": 2},
             "transformer12": {"width": 16, "layers": 2, "heads": 2}}[variant]
    sizes.update(kw)
    return build_denoiser(variant, layout, 0, **sizes)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("T", [3, 4, 5, 6])
def test_fresh_model_preserves_shape(variant, T):
    model = build_denoiser(variant, JOINT, 0)
    x = np.random.default_rng(T).standard_normal((2, JOINT.channels, T)).astype(np.float32)
    out = denoise(model, x, [1, 7])
    assert out.shape == x.shape and np.all(np.isfinite(out))
    assert model.num_parameters() > 0


@pytest.mark.parametrize("variant", VARIANTS)
def test_denoise_is_deterministic(variant):
    model = small(variant)
    x = np.random.default_rng(0).standard_normal((3, JOINT.channels, 4)).astype(np.float32)
    assert denoise(model, x, 5).tobytes() == denoise(model, x, 5).tobytes()
    other = small(variant)
    assert denoise(other, x, 5).tobytes() == denoise(model, x, 5).tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_layout_mismatch_is_rejected(variant):
    model = small(variant)
    with pytest.raises(ValueError):
        denoise(model, np.zeros((1, JOINT.channels + 1, 3)), 1)
    with pytest.raises(ValueError):
        denoise(model, np.zeros((1, JOINT.channels, 7)), 1)


def test_full_scale_presets():
    assert PRESETS["unet3"]["full"]["widths"] == (256, 512, 1024)
    assert tuple(w * 8 for w in PRESETS["unet3"]["desk"]["widths"]) == (256, 512, 1024)
    assert PRESETS["transformer12"]["full"]["layers"] == 12
    assert PRESETS["transformer12"]["full"]["width"] == 1024
    assert PRESETS["unet_attn2"]["full"]["attention_heads"] == 32
    assert PRESETS["unet_attn2"]["full"]["act"] == "silu"
    assert PRESETS["unet3"]["full"]["act"] == "mish"


def test_unet_temporal_lengths_follow_conv_arithmetic():
    model = build_denoiser("unet3", Layout(6, 4, 3, (3,), "concat"), 0)
    assert model.depth == 2
    lengths = [3]
    for _ in range(2):
        lengths.append(conv1d_output_length(lengths[-1], 2, 1, 0))
    for _ in range(2):
        lengths.append(conv1d_output_length(lengths[-1], 2, 1, 1))
    assert lengths == [3, 2, 1, 2, 3]
    assert model.temporal_lengths(3) == lengths


def test_unet_uses_full_depth_when_horizon_allows():
    assert build_denoiser("unet3", Layout(6, 4, 3, (4, 5), "concat"), 0).depth == 3
    assert build_denoiser("unet3", Layout(6, 4, 3, (4, 5), "concat"), 0).temporal_lengths(4) == [4, 3, 2, 1, 2, 3, 4]


def test_unet_depth_error_message():
    with pytest.raises(ValueError, match="horizon 3 supports at most 2 downsample levels"):
        build_denoiser("unet3", Layout(6, 4, 3, (3,), "concat"), 0, depth=3)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_final_layer_gives_near_zero_output(variant):
    model = small(variant, zero_final=True)
    out = denoise(model, np.zeros((2, JOINT.channels, 3), np.float32), 10)
    assert np.max(np.abs(out)) < 1e-6


def test_sinusoidal_features_at_zero():
    np.testing.assert_array_equal(sinusoidal_features(0, 8)[0], [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoidal_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_features(1, 7)


@pytest.mark.parametrize("dim", [16, 32])
def test_time_embedding_has_no_collisions(dim):
    N = 200
    for table in (sinusoidal_features(np.arange(1, N + 1), dim),
                  TimeEmbedding(dim, np.random.default_rng(0)).astype(np.float64)(np.arange(1, N + 1)).data):
        d2 = ((table[:, None, :] - table[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        assert d2.min() > 0


def test_time_embedding_deterministic():
    emb = TimeEmbedding(16, np.random.default_rng(0))
    np.testing.assert_array_equal(emb([3, 9]).data, emb([3, 9]).data)


def experts_and_input(routing):
    rng = np.random.default_rng(0)
    horizons = (3, 4)
    experts = [ResidualBlock(4, 4, 8, 2, rng) for _ in horizons]
    moe = MoE(experts, horizons, routing, rng)
    x = Tensor(rng.standard_normal((2, 4, 3)).astype(np.float32))
    temb = Tensor(rng.standard_normal((2, 8)).astype(np.float32))
    return moe, experts, x, temb


def test_direct_routing_is_bit_identical_to_expert():
    moe, experts, x, temb = experts_and_input("direct")
    assert moe(x, temb, 3).data.tobytes() == experts[0](x, temb).data.tobytes()
    assert moe(x, temb, 4).data.tobytes() == experts[1](x, temb).data.tobytes()
    with pytest.raises(ValueError, match="no expert for horizon 5"):
        moe(x, temb, 5)


def test_learned_routing_with_uniform_gate_is_mean():
    moe, experts, x, temb = experts_and_input("learned")
    moe.gate2.weight.data[:] = 0
    moe.gate2.bias.data[:] = 0
    mean = (experts[0](x, temb).data + experts[1](x, temb).data) / 2
    np.testing.assert_allclose(moe(x, temb, 3).data, mean, rtol=1e-6, atol=1e-6)


def test_learned_gate_sums_to_one():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        moe = MoE([ResidualBlock(4, 4, 8, 2, rng) for _ in range(4)], (3, 4, 5, 6), "learned", rng)
        for T in (3, 4, 5, 6):
            g = moe.gate(T).data
            assert np.all(g > 0) and abs(g.sum() - 1) <= 1e-6


def test_moe_combine_is_weighted_sum():
    a, b = Tensor(np.ones((1, 2, 3))), Tensor(np.full((1, 2, 3), 3.0))
    gate = Tensor(np.array([[0.25, 0.75]]))
    np.testing.assert_allclose(moe_combine([a, b], gate).data, 2.5)


def test_moe_requires_one_expert_per_horizon():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        MoE([ResidualBlock(4, 4, 8, 2, rng)], (3, 4), "direct", rng)


def test_moe_requires_moe_layout():
    with pytest.raises(ValueError):
        build_denoiser("unet3", JOINT, 0, moe_site="convolution")


@pytest.mark.parametrize("variant", VARIANTS)
def test_direct_routing_only_updates_matching_expert(variant):
    layout = Layout(6, 4, 3, (3, 4), "concat", "moe")
    model = small(variant, layout)
    x = Tensor(np.random.default_rng(1).standard_normal((2, layout.channels, 3)).astype(np.float32))
    loss = ops.sum(ops.square(model(x, np.array([2, 5]))))
    backward(loss, model.parameters())
    touched = {name for name, p in model.named_parameters() if np.any(p.grad != 0)}
    experts_of = {name for name, _ in model.named_parameters() if ".experts." in name}
    assert experts_of, "model has no expert parameters"
    assert not any(".experts.1." in name for name in touched)
    assert any(".experts.0." in name for name in touched)
    shared = {name for name, _ in model.named_parameters()} - experts_of
    assert shared & touched


@pytest.mark.parametrize("variant", VARIANTS)
def test_parameter_gradients_match_finite_differences(variant):
    layout = Layout(5, 3, 2, (3,), "concat")
    model = small(variant, layout).astype(np.float64)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, layout.channels, 3))
    target = rng.standard_normal(x.shape)
    steps = np.array([3, 11])

    def loss():
        return ops.sum(ops.square(model(Tensor(x), steps) - Tensor(target)))

    model.zero_grad()
    backward(loss(), model.parameters())
    # group norm over three positions is sharply curved; h=1e-3 truncation exceeds the tolerance
    for name, p in model.named_parameters():
        for flat in rng.choice(p.size, size=min(3, p.size), replace=False):
            index = np.unravel_index(flat, p.shape)
            numeric = component_derivative(lambda: float(loss().data), p.data, index, h=1e-5)
            assert close(float(p.grad[index]), numeric), (name, index, p.grad[index], numeric)


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip(tmp_path, variant):
    layout = Layout(6, 4, 3, (3, 4), "mask", "moe")
    model = small(variant, layout, task_actions=[[0, 1], [2, 3], [4, 5]])
    path = tmp_path / "m.ckpt"
    save_denoiser(path, model, {"N": 50})
    back, meta = load_denoiser(path)
    assert meta["N"] == 50 and meta["variant"] == variant
    assert back.layout == layout and back.task_actions == model.task_actions
    x = np.random.default_rng(0).standard_normal((1, layout.channels, 4)).astype(np.float32)
    assert denoise(back, x, 3).tobytes() == denoise(model, x, 3).tobytes()
