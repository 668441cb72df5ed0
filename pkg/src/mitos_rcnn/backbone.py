"""Truncated VGG-style feature extractor returning the conv_3 and conv_4 maps.

Stages 1-3 each end in a 2x2/2 max pool, so conv_3 sits at stride 4 and
conv_4 at stride 8 (74x74 and 37x37 for a 299x299 input). There is no fifth
stage: its 16-px stride would push the smallest detectable object to ~44 px.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, maxpool2d, relu

INPUT_SIZE = 299
NUM_STAGES = 4
VGG16_STAGE_CHANNELS = (64, 128, 256, 512)
VGG16_CONVS_PER_STAGE = (2, 2, 3, 3)

# smallest object (px) whose footprint survives down to each map
MIN_DETECTABLE_SIZE_PX = {"conv_3": 15, "conv_4": 22, "conv_5": 44}
FEATURE_STRIDES = {"conv_3": 4, "conv_4": 8}
INIT_SCHEMES = ("he", "gaussian")


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    convs_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    input_size: int = INPUT_SIZE
    # "he": N(0, 2 / fan_in), for training from scratch; "gaussian": N(0, sigma^2) as for the other layers
    init: str = "he"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "convs_per_stage", tuple(int(c) for c in self.convs_per_stage))
        if len(self.stage_channels) != NUM_STAGES or len(self.convs_per_stage) != NUM_STAGES:
            raise ValueError(
                f"backbone must have exactly {NUM_STAGES} stages (conv_1..conv_4), got "
                f"{len(self.stage_channels)} channel entries and {len(self.convs_per_stage)} depth entries"
            )
        if min(self.stage_channels) < 1 or min(self.convs_per_stage) < 1:
            raise ValueError("stage widths and depths must be positive")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"backbone init must be one of {INIT_SCHEMES}, got {self.init!r}")

    @classmethod
    def vgg16(cls) -> "BackboneConfig":
        return cls(VGG16_STAGE_CHANNELS, VGG16_CONVS_PER_STAGE)

    def map_sizes(self) -> tuple[int, int]:
        """Spatial sizes of (conv_3, conv_4) for this input size."""
        s = self.input_size
        for _ in range(2):
            s = (s - 2) // 2 + 1
        s3 = s
        s4 = (s3 - 2) // 2 + 1
        return s3, s4


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def conv_names(self):
        c_in = 3
        for si, (width, depth) in enumerate(zip(self.config.stage_channels, self.config.convs_per_stage), 1):
            for ci in range(1, depth + 1):
                yield f"backbone/stage{si}/conv{ci}", c_in, width
                c_in = width

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        return backbone_forward(self, image)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def build_backbone(config: BackboneConfig, rng_seed: int, sigma: float = 0.01) -> Backbone:
    """Fresh backbone; ``sigma`` only applies under the "gaussian" init scheme."""
    rng = np.random.default_rng(rng_seed)
    b = Backbone(config)
    for prefix, c_in, c_out in b.conv_names():
        std = math.sqrt(2.0 / (9 * c_in)) if config.init == "he" else sigma
        b.params[f"{prefix}/weight"] = Tensor(rng.normal(0.0, std, (c_out, c_in, 3, 3)), requires_grad=True)
        b.params[f"{prefix}/bias"] = Tensor(np.zeros(c_out), requires_grad=True)
    return b


def backbone_forward(b: Backbone, image: Tensor) -> tuple[Tensor, Tensor]:
    n = b.config.input_size
    if image.shape != (3, n, n):
        raise ShapeError(f"backbone expects input of shape (3, {n}, {n}), got {image.shape}")
    x = image
    outputs = []
    names = list(b.conv_names())
    for stage in range(1, NUM_STAGES + 1):
        if stage > 1:
            x = maxpool2d(x, 2, 2)
        for prefix, _, _ in names:
            if prefix.startswith(f"backbone/stage{stage}/"):
                x = relu(conv2d(x, b.params[f"{prefix}/weight"], b.params[f"{prefix}/bias"], stride=1, pad=1))
        outputs.append(x)
    return outputs[2], outputs[3]
