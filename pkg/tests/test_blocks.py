"""Attention gate, residual blocks, and backbone contracts."""

import numpy as np
import pytest

from dala import functional as F
from dala.blocks import (
    Backbone,
    BackboneConfig,
    ChannelAttention,
    ResidualBlock,
    attention_forward,
    insert_attention,
    toy_backbone_config,
)
from dala.exceptions import ConfigurationError, DimensionError, UsageError
from dala.tensor import Tensor

from gradcheck import sampled_param_check


def identity_attention(channels: int) -> ChannelAttention:
    """Attention whose two layers are identity maps with zero biases."""
    attn = ChannelAttention(channels, reduction=1)
    attn.fc1_w.data = np.eye(channels, dtype=np.float32)
    attn.fc1_b.data = np.zeros(channels, dtype=np.float32)
    attn.fc2_w.data = np.eye(channels, dtype=np.float32)
    attn.fc2_b.data = np.zeros(channels, dtype=np.float32)
    return attn


def unit_gate_attention(channels: int) -> ChannelAttention:
    """Attention wired so every gate is exactly 1.0."""
    attn = ChannelAttention(channels, reduction=1)
    attn.fc1_w.data = np.zeros_like(attn.fc1_w.data)
    attn.fc1_b.data = np.zeros_like(attn.fc1_b.data)
    attn.fc2_w.data = np.zeros_like(attn.fc2_w.data)
    attn.fc2_b.data = np.ones_like(attn.fc2_b.data)
    return attn


class TestChannelAttention:
    def test_identity_fcs_square_the_channel_means(self):
        """Constant channels (1, 2) squeeze to (1, 2); identity FCs keep
        them; gating multiplies input by its own mean -> (1, 4)."""
        attn = identity_attention(2)
        x = np.zeros((1, 2, 3, 3), dtype=np.float32)
        x[0, 0] = 1.0
        x[0, 1] = 2.0
        out = attention_forward(attn, Tensor(x))
        assert np.all(out.data[0, 0] == 1.0)
        assert np.all(out.data[0, 1] == 4.0)

    def test_zero_input_gives_zero_output(self):
        attn = identity_attention(3)
        out = attn(Tensor(np.zeros((2, 3, 4, 4))))
        assert np.all(out.data == 0.0)

    def test_negative_gate_preactivation_zeroes_channel(self):
        attn = identity_attention(2)
        attn.fc2_w.data = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.float32)
        x = np.ones((1, 2, 2, 2), dtype=np.float32)
        out = attn(Tensor(x))
        assert np.all(out.data[0, 0] == 1.0)  # gate 1 survives
        assert np.all(out.data[0, 1] == 0.0)  # relu clamps the negative gate

    def test_shape_preserved(self, rng):
        attn = ChannelAttention(8, reduction=4, rng=rng)
        x = Tensor(rng.standard_normal((3, 8, 5, 7)).astype(np.float32))
        assert attn(x).shape == x.shape

    def test_gates_always_non_negative(self, rng):
        attn = ChannelAttention(6, reduction=2, rng=rng)
        for _ in range(20):
            x = Tensor(rng.standard_normal((2, 6, 4, 4)).astype(np.float32))
            gates = attn.gates(x)
            assert np.all(gates.data >= 0.0)

    def test_output_monotone_in_gate_scale(self, rng):
        """Non-negative weights and input: scaling fc2 up scales gates up,
        and output magnitudes never decrease."""
        attn = ChannelAttention(4, reduction=2, rng=rng)
        attn.fc1_w.data = np.abs(attn.fc1_w.data)
        attn.fc2_w.data = np.abs(attn.fc2_w.data)
        x = Tensor(np.abs(rng.standard_normal((2, 4, 3, 3))).astype(np.float32))
        small = attn(x).data.copy()
        attn.fc2_w.data = 2.0 * attn.fc2_w.data
        large = attn(x).data
        assert np.all(np.abs(large) >= np.abs(small))

    def test_channel_mismatch_raises(self, rng):
        attn = ChannelAttention(4, rng=rng)
        with pytest.raises(DimensionError):
            attn(Tensor(np.zeros((1, 3, 2, 2))))

    def test_bottleneck_clamped_to_one(self):
        attn = ChannelAttention(4, reduction=16)
        assert attn.hidden == 1

    def test_gradients_flow_through_gate(self, rng):
        attn = ChannelAttention(4, reduction=2, rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        weights = Tensor(rng.standard_normal((2, 4, 3, 3)))
        params = [x, *attn.named_parameters().values()]
        sampled_param_check(lambda: F.sum_all(F.mul(attn(x), weights)), params, rng)


class TestResidualBlock:
    def test_zero_kernels_identity_skip_gives_relu_of_input(self, rng):
        block = ResidualBlock(4, 4, stride=1, rng=rng)
        block.conv1_w.data = np.zeros_like(block.conv1_w.data)
        block.conv2_w.data = np.zeros_like(block.conv2_w.data)
        x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        out = block(Tensor(x))
        np.testing.assert_array_equal(out.data, np.maximum(x, 0.0))

    def test_unit_gate_attention_matches_disabled_bitwise(self, rng):
        seed_rng = np.random.default_rng(5)
        plain = ResidualBlock(4, 4, stride=1, rng=seed_rng)
        gated = ResidualBlock(4, 4, stride=1, attention=unit_gate_attention(4))
        gated.conv1_w.data = plain.conv1_w.data.copy()
        gated.conv2_w.data = plain.conv2_w.data.copy()
        x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
        assert gated(x).data.tobytes() == plain(x).data.tobytes()

    def test_random_input_output_finite(self, rng):
        block = ResidualBlock(3, 8, stride=2, rng=rng)
        out = block(Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32)))
        assert np.all(np.isfinite(out.data))

    def test_projection_created_only_when_needed(self, rng):
        assert ResidualBlock(4, 4, stride=1, rng=rng).proj_w is None
        assert ResidualBlock(4, 8, stride=1, rng=rng).proj_w is not None
        assert ResidualBlock(4, 4, stride=2, rng=rng).proj_w is not None


def attention_param_count(channels: int, reduction: int) -> int:
    hidden = max(1, channels // reduction)
    return 2 * channels * hidden + hidden + channels


def closed_form_param_count(config: BackboneConfig) -> int:
    """Layer-by-layer parameter sum, derived independently of the model."""
    total = config.stage_widths[0] * 3 * config.stem_kernel**2
    in_ch = config.stage_widths[0]
    for idx, (width, blocks, stride) in enumerate(
        zip(config.stage_widths, config.stage_blocks, config.stage_strides), start=1
    ):
        for b in range(blocks):
            s = stride if b == 0 else 1
            total += width * in_ch * 9 + width * width * 9
            if in_ch != width or s != 1:
                total += width * in_ch
            if idx in config.attention_stages and b == blocks - 1:
                total += attention_param_count(width, config.reduction_ratio)
            in_ch = width
    total += config.stage_widths[-1] * config.num_classes + config.num_classes
    return total


class TestBackbone:
    def test_toy_logits_shape(self, rng):
        model = Backbone(toy_backbone_config(), seed=1)
        x = Tensor(rng.standard_normal((3, 3, 32, 32)).astype(np.float32))
        logits = model(x)
        assert logits.shape == (3, 2)

    def test_forward_deterministic(self, rng):
        model = Backbone(toy_backbone_config(), seed=2)
        x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        a = model(x)
        b = model(x)
        assert a.data.tobytes() == b.data.tobytes()

    def test_same_seed_same_weights(self):
        a = Backbone(toy_backbone_config(), seed=3)
        b = Backbone(toy_backbone_config(), seed=3)
        for (na, pa), (nb, pb) in zip(
            a.named_parameters().items(), b.named_parameters().items()
        ):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_attention_insertion_parameter_delta(self):
        base = toy_backbone_config(attention_stages=())
        with_attn = toy_backbone_config(attention_stages=(4,))
        delta = Backbone(with_attn).parameter_count() - Backbone(base).parameter_count()
        c4 = with_attn.stage_widths[-1]
        assert delta == attention_param_count(c4, with_attn.reduction_ratio)

    def test_parameter_count_matches_closed_form(self):
        for config in [
            toy_backbone_config(),
            toy_backbone_config(attention_stages=()),
            toy_backbone_config(attention_stages=(1, 2, 3, 4)),
            BackboneConfig(num_classes=5, stage_blocks=(2, 2, 2, 2)).validate(),
        ]:
            assert Backbone(config).parameter_count() == closed_form_param_count(config)

    def test_stage_features_exposed(self, rng):
        model = Backbone(toy_backbone_config(), seed=4)
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        logits, features = model.forward_with_features(x)
        assert sorted(features) == ["stage1", "stage2", "stage3", "stage4"]
        assert features["stage4"].shape == (1, 64, 4, 4)
        assert model.feature_map(features, 4) is features["stage4"]
        assert model.feature_map(features, "stage2") is features["stage2"]

    def test_unknown_stage_raises(self, rng):
        model = Backbone(toy_backbone_config(), seed=4)
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        _, features = model.forward_with_features(x)
        with pytest.raises(UsageError):
            model.feature_map(features, "stage9")

    def test_backbone_gradients_match_finite_differences(self, rng):
        config = BackboneConfig(
            num_classes=2,
            input_side=8,
            stem_kernel=3,
            stem_stride=1,
            stem_pool=False,
            stage_widths=(2, 3, 4, 4),
            stage_blocks=(1, 1, 1, 1),
            stage_strides=(1, 2, 2, 1),
            attention_stages=(4,),
            reduction_ratio=2,
            dropout_rate=0.0,
        ).validate()
        model = Backbone(config, seed=7, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        labels = np.array([0, 1])

        def loss():
            return F.softmax_cross_entropy(model(x, training=False), labels)

        sampled_param_check(loss, model.parameters(), rng, n_coords=10)


class TestInsertAttention:
    def test_stage_four_label_matches_best_row(self):
        config = insert_attention(toy_backbone_config(attention_stages=()), 4)
        assert config.attention_stages == (4,)
        assert config.label == "layer-4"

    def test_idempotent(self):
        config = toy_backbone_config()
        once = insert_attention(config, 4)
        twice = insert_attention(once, 4)
        assert once == twice

    def test_stage_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            insert_attention(toy_backbone_config(), 0)

    def test_stage_five_rejected(self):
        with pytest.raises(ConfigurationError):
            insert_attention(toy_backbone_config(), 5)

    def test_default_config_ships_stage_four(self):
        assert BackboneConfig().attention_stages == (4,)
        assert toy_backbone_config().attention_stages == (4,)


class TestConfigSerialization:
    def test_json_round_trip(self):
        config = toy_backbone_config(attention_stages=(2, 4))
        assert BackboneConfig.from_json(config.to_json()) == config

    def test_validation_catches_bad_values(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(stage_widths=()).validate()
        with pytest.raises(ConfigurationError):
            BackboneConfig(attention_stages=(9,)).validate()
        with pytest.raises(ConfigurationError):
            BackboneConfig(dropout_rate=1.5).validate()
