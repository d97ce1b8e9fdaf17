"""Small convolutional feature extractor.

Stage 0 keeps the input resolution; every later stage halves it with a
stride-2 conv, so stage k outputs (input_size / 2^k)^2 spatial positions.
One stage's output is tapped as the per-pixel feature distribution that
feeds the OT loss; the last stage is pooled and projected to a unit-norm
embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, as_tensor, conv2d, normalize_rows

# Stride-2 stages use an even kernel so the halved output extent is exact.
_DOWN_KERNEL = 4


@dataclass
class BackboneConfig:
    input_size: int = 32
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    embedding_dim: int = 64
    tap_stage: int = 2
    kernel_size: int = 3  # stride-1 stage 0 kernel; must be odd

    def validate(self) -> "BackboneConfig":
        if not self.stage_channels:
            raise ConfigurationError("at least one stage is required")
        if not 0 <= self.tap_stage < len(self.stage_channels):
            raise ConfigurationError(
                f"tap_stage {self.tap_stage} outside stages "
                f"0..{len(self.stage_channels) - 1}"
            )
        halvings = len(self.stage_channels) - 1
        if self.input_size % (2 ** halvings) != 0 \
                or self.input_size < 2 ** halvings:
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by 2^{halvings} "
                "(stages after the first each halve the extent)"
            )
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd")
        return self

    def stage_kernel(self, stage: int) -> tuple[int, int, int]:
        """(kernel, stride, padding) for one stage."""
        if stage == 0:
            return self.kernel_size, 1, self.kernel_size // 2
        return _DOWN_KERNEL, 2, (_DOWN_KERNEL - 2) // 2

    def tap_spatial(self) -> int:
        return self.input_size // (2 ** self.tap_stage)


@dataclass
class ForwardOutput:
    feature_maps: Tensor  # (N, d_tap, h, w)
    embedding: Tensor     # (N, embedding_dim), rows unit-norm


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming-style fan-in init for conv kernels and the projection;
    conv biases start at zero."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    c_prev = cfg.in_channels
    for i, c_out in enumerate(cfg.stage_channels):
        k, _, _ = cfg.stage_kernel(i)
        fan_in = c_prev * k * k
        std = math.sqrt(2.0 / fan_in)
        params[f"stage{i}.weight"] = Tensor(
            rng.normal(0.0, std, size=(c_out, c_prev, k, k)), requires_grad=True
        )
        params[f"stage{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_prev = c_out
    std = math.sqrt(1.0 / c_prev)
    params["proj.weight"] = Tensor(
        rng.normal(0.0, std, size=(c_prev, cfg.embedding_dim)), requires_grad=True
    )
    # Small random projection bias keeps the embedding well-defined even
    # when every pooled activation is zero (all-black input).
    params["proj.bias"] = Tensor(
        rng.normal(0.0, 0.01, size=cfg.embedding_dim), requires_grad=True
    )
    return params


def forward(images: Tensor, params: dict[str, Tensor],
            cfg: BackboneConfig) -> ForwardOutput:
    """Run the conv+relu stages, capture the tap, pool and project.

    Accepts (c, H, W) or batched (N, c, H, W) images.
    """
    cfg.validate()
    x = as_tensor(images)
    if len(x.shape) == 3:
        x = x.reshape(1, *x.shape)
    if len(x.shape) != 4 or x.shape[1] != cfg.in_channels \
            or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ConfigurationError(
            f"expected images (N, {cfg.in_channels}, {cfg.input_size}, "
            f"{cfg.input_size}), got {x.shape}"
        )
    tap = None
    for i in range(len(cfg.stage_channels)):
        _, stride, pad = cfg.stage_kernel(i)
        x = conv2d(x, params[f"stage{i}.weight"], stride=stride, padding=pad)
        x = x + params[f"stage{i}.bias"].reshape(1, -1, 1, 1)
        if i == cfg.tap_stage:
            # pre-activation: rectified maps routinely contain all-zero
            # pixel vectors, which are degenerate atoms for cosine cost
            tap = x
        x = x.relu()
    pooled = x.mean(axis=(2, 3))                      # (N, c_last)
    embedding = pooled @ params["proj.weight"] + params["proj.bias"].reshape(1, -1)
    embedding = normalize_rows(embedding)
    return ForwardOutput(feature_maps=tap, embedding=embedding)


def to_distribution(feature_maps: Tensor) -> Tensor:
    """Reshape a (d, h, w) feature-map stack into the (n, d) matrix of
    per-pixel feature vectors, n = h * w, row-major pixel order."""
    fm = as_tensor(feature_maps)
    if len(fm.shape) != 3:
        raise ConfigurationError(
            f"expected a (d, h, w) feature-map stack, got {fm.shape}"
        )
    d, h, w = fm.shape
    return fm.reshape(d, h * w).T
