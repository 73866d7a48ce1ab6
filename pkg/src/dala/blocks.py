"""Channel-attention gate, residual blocks, and the configurable backbone.

The attention gate squeezes each channel to its global average, runs the
result through a two-layer bottleneck (LeakyReLU after the first layer,
ReLU after the second), and multiplies the input channelwise by the
resulting gates.  The final ReLU leaves gates unbounded above, so a gate
may amplify a channel beyond 1 -- this is intentional.

The backbone is a ResNet-style stack: stem convolution (optionally
max-pooled), four stages of residual blocks, global average pooling,
dropout, and a fully connected classifier.  Attention, when enabled for a
stage, is applied to the main-path output of that stage's last block,
before the skip addition.  Convolutions carry no bias; the classifier and
attention layers do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import functional as F
from .exceptions import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor

__all__ = [
    "ChannelAttention",
    "ResidualBlock",
    "Backbone",
    "BackboneConfig",
    "attention_forward",
    "residual_block_forward",
    "backbone_forward",
    "insert_attention",
    "toy_backbone_config",
]


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


class ChannelAttention:
    """Squeeze / recalibrate / gate block over C channels.

    Bottleneck width is max(1, C // reduction).  Gates are non-negative by
    construction (final ReLU) and scale the input per channel.
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        leaky_slope: float = 0.01,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if channels < 1:
            raise ConfigurationError(f"channels must be positive, got {channels}")
        if reduction < 1:
            raise ConfigurationError(f"reduction ratio must be positive, got {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.reduction = reduction
        self.leaky_slope = leaky_slope
        hidden = max(1, channels // reduction)
        self.hidden = hidden
        self.fc1_w = _he_normal(rng, (channels, hidden), channels, dtype)
        self.fc1_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.fc2_w = _he_normal(rng, (hidden, channels), hidden, dtype)
        self.fc2_b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def gates(self, x: Tensor) -> Tensor:
        """Per-sample, per-channel gate values [N,C]."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"attention expects [N,{self.channels},H,W], got {tuple(x.shape)}"
            )
        squeezed = F.reshape(F.adaptive_avg_pool2d(x, 1, 1), (x.shape[0], self.channels))
        hidden = F.leaky_relu(
            F.fully_connected(squeezed, self.fc1_w, self.fc1_b), self.leaky_slope
        )
        return F.relu(F.fully_connected(hidden, self.fc2_w, self.fc2_b))

    def forward(self, x: Tensor) -> Tensor:
        return F.channel_scale(x, self.gates(x))

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}fc1.w": self.fc1_w,
            f"{prefix}fc1.b": self.fc1_b,
            f"{prefix}fc2.w": self.fc2_w,
            f"{prefix}fc2.b": self.fc2_b,
        }


def attention_forward(block: ChannelAttention, x: Tensor) -> Tensor:
    return block.forward(x)


class ResidualBlock:
    """conv3x3(stride) -> relu -> conv3x3, plus a skip path; output is
    relu(main + skip).  The skip uses a 1x1 strided projection whenever
    the channel count or resolution changes.  An optional attention gate
    recalibrates the main path before the addition."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        attention: Optional[ChannelAttention] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.attention = attention
        self.conv1_w = _he_normal(
            rng, (out_channels, in_channels, 3, 3), in_channels * 9, dtype
        )
        self.conv2_w = _he_normal(
            rng, (out_channels, out_channels, 3, 3), out_channels * 9, dtype
        )
        if in_channels != out_channels or stride != 1:
            self.proj_w = _he_normal(
                rng, (out_channels, in_channels, 1, 1), in_channels, dtype
            )
        else:
            self.proj_w = None

    def forward(self, x: Tensor) -> Tensor:
        main = F.relu(F.conv2d(x, self.conv1_w, stride=self.stride, padding=1))
        main = F.conv2d(main, self.conv2_w, stride=1, padding=1)
        if self.attention is not None:
            main = self.attention(main)
        skip = x if self.proj_w is None else F.conv2d(x, self.proj_w, stride=self.stride)
        return F.relu(F.add(main, skip))

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {f"{prefix}conv1.w": self.conv1_w, f"{prefix}conv2.w": self.conv2_w}
        if self.proj_w is not None:
            params[f"{prefix}proj.w"] = self.proj_w
        if self.attention is not None:
            params.update(self.attention.named_parameters(f"{prefix}attn."))
        return params


def residual_block_forward(block: ResidualBlock, x: Tensor) -> Tensor:
    return block.forward(x)


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the backbone; serializable as a JSON document."""

    num_classes: int = 2
    input_side: int = 224
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    attention_stages: tuple[int, ...] = (4,)
    reduction_ratio: int = 16
    leaky_slope: float = 0.01
    dropout_rate: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(
            self, "attention_stages", tuple(sorted(set(int(s) for s in self.attention_stages)))
        )

    def validate(self) -> "BackboneConfig":
        n = len(self.stage_widths)
        if n < 1:
            raise ConfigurationError("at least one stage is required")
        if len(self.stage_blocks) != n or len(self.stage_strides) != n:
            raise ConfigurationError("stage_widths, stage_blocks, stage_strides must align")
        if any(w < 1 for w in self.stage_widths):
            raise ConfigurationError("stage widths must be positive")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigurationError("stage block counts must be positive")
        for s in self.attention_stages:
            if not 1 <= s <= n:
                raise ConfigurationError(f"attention stage {s} outside 1..{n}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.reduction_ratio < 1:
            raise ConfigurationError("reduction ratio must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout rate must be in [0, 1)")
        if self.input_side < 1:
            raise ConfigurationError("input side must be positive")
        return self

    @property
    def label(self) -> str:
        """Row label for insertion sweeps: 'baseline' or 'layer-<stages>'."""
        if not self.attention_stages:
            return "baseline"
        return "layer-" + "+".join(str(s) for s in self.attention_stages)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_side": self.input_side,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "stem_pool": self.stem_pool,
            "stage_widths": list(self.stage_widths),
            "stage_blocks": list(self.stage_blocks),
            "stage_strides": list(self.stage_strides),
            "attention_stages": list(self.attention_stages),
            "reduction_ratio": self.reduction_ratio,
            "leaky_slope": self.leaky_slope,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        return cls.from_dict(json.loads(text))


def insert_attention(config: BackboneConfig, stage: int) -> BackboneConfig:
    """Return a config with the attention gate enabled on the last block
    of ``stage``.  Idempotent; stage must index an existing stage."""
    if not 1 <= stage <= len(config.stage_widths):
        raise ConfigurationError(
            f"stage {stage} outside 1..{len(config.stage_widths)}"
        )
    stages = tuple(sorted(set(config.attention_stages) | {stage}))
    return replace(config, attention_stages=stages)


def toy_backbone_config(
    input_side: int = 32,
    num_classes: int = 2,
    attention_stages: tuple[int, ...] = (4,),
) -> BackboneConfig:
    """Desk-scale backbone: 3x3 stride-1 stem, widths 8/16/32/64, one
    block per stage."""
    return BackboneConfig(
        num_classes=num_classes,
        input_side=input_side,
        stem_kernel=3,
        stem_stride=1,
        stem_pool=False,
        stage_widths=(8, 16, 32, 64),
        stage_blocks=(1, 1, 1, 1),
        stage_strides=(1, 2, 2, 2),
        attention_stages=attention_stages,
        reduction_ratio=16,
    ).validate()


class Backbone:
    """Config-built residual network with named per-stage feature access."""

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.last_forward_training: Optional[bool] = None
        rng = np.random.default_rng([seed, 0xDA1A])

        self.stem_w = _he_normal(
            rng,
            (config.stage_widths[0], 3, config.stem_kernel, config.stem_kernel),
            3 * config.stem_kernel**2,
            dtype,
        )
        self.stages: list[list[ResidualBlock]] = []
        in_ch = config.stage_widths[0]
        for idx, (width, blocks, stride) in enumerate(
            zip(config.stage_widths, config.stage_blocks, config.stage_strides), start=1
        ):
            stage = []
            for b in range(blocks):
                attn = None
                if idx in config.attention_stages and b == blocks - 1:
                    attn = ChannelAttention(
                        width,
                        reduction=config.reduction_ratio,
                        leaky_slope=config.leaky_slope,
                        rng=rng,
                        dtype=dtype,
                    )
                stage.append(
                    ResidualBlock(
                        in_ch,
                        width,
                        stride=stride if b == 0 else 1,
                        attention=attn,
                        rng=rng,
                        dtype=dtype,
                    )
                )
                in_ch = width
            self.stages.append(stage)

        # small classifier init keeps initial logits near zero, which the
        # low default learning rate needs to converge inside its budget
        final_width = config.stage_widths[-1]
        self.fc_w = Tensor(
            (rng.standard_normal((final_width, config.num_classes)) * 0.01).astype(dtype),
            requires_grad=True,
        )
        self.fc_b = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def stage_names(self) -> list[str]:
        return [f"stage{i}" for i in range(1, self.num_stages + 1)]

    def forward_with_features(
        self, x: Tensor, training: bool = False, dropout_seed: int = 0
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """Logits plus each stage's final activation, keyed 'stage1'.."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"backbone expects [N,3,S,S] input, got {tuple(x.shape)}")
        self.last_forward_training = training
        out = F.conv2d(
            x, self.stem_w, stride=self.config.stem_stride, padding=self.config.stem_kernel // 2
        )
        out = F.relu(out)
        if self.config.stem_pool:
            out = F.max_pool2d(out, window=2, stride=2)
        features: dict[str, Tensor] = {}
        for i, stage in enumerate(self.stages, start=1):
            for block in stage:
                out = block(out)
            features[f"stage{i}"] = out
        pooled = F.reshape(F.adaptive_avg_pool2d(out, 1, 1), (x.shape[0], out.shape[1]))
        pooled = F.dropout(pooled, self.config.dropout_rate, training, dropout_seed)
        logits = F.fully_connected(pooled, self.fc_w, self.fc_b)
        return logits, features

    def forward(self, x: Tensor, training: bool = False, dropout_seed: int = 0) -> Tensor:
        logits, _ = self.forward_with_features(x, training=training, dropout_seed=dropout_seed)
        return logits

    __call__ = forward

    def feature_map(self, features: dict[str, Tensor], stage) -> Tensor:
        """Resolve a stage id (int or 'stageN' name) in a features dict."""
        name = f"stage{stage}" if isinstance(stage, int) else str(stage)
        if name not in features:
            raise UsageError(f"unknown stage {stage!r}; have {sorted(features)}")
        return features[name]

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"stem.w": self.stem_w}
        for i, stage in enumerate(self.stages, start=1):
            for b, block in enumerate(stage, start=1):
                params.update(block.named_parameters(f"stage{i}.block{b}."))
        params["head.fc.w"] = self.fc_w
        params["head.fc.b"] = self.fc_b
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def backbone_forward(model: Backbone, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    return model.forward_with_features(x)
