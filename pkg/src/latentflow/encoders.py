"""Image feature and context encoders producing 1/8-resolution maps.

Both encoders are a stand-in for a pretrained transformer backbone: three
stride-2 blocks of (3x3 conv, instance normalization, ReLU).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latentflow.errors import ConfigError
from latentflow.ndtensor import Conv2d, Module, Tensor, as_tensor, layer_norm, relu


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    context_dim: int = 64
    freeze_image_encoder: bool = False
    freeze_context_encoder: bool = False
    channels: tuple = (32, 64)

    def __post_init__(self):
        if self.feature_dim < 1 or self.context_dim < 1:
            raise ConfigError("encoder dims must be >= 1")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial dims of ``[N, C, H, W]``."""
    n, c, h, w = x.shape
    return layer_norm(x.reshape(n, c, h * w), eps).reshape(n, c, h, w)


def check_image_size(shape: tuple) -> None:
    h, w = shape[-2:]
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise ConfigError(f"image size {h}x{w} is not a positive multiple of 8; pad or tile first")


class ConvEncoder(Module):
    """Maps ``[3, H, W]`` (or batched ``[N, 3, H, W]``) images in [0, 1] to 1/8-res features."""

    def __init__(self, out_dim: int, rng: np.random.Generator, channels: tuple = (32, 64)):
        chans = [3, *channels, out_dim]
        self.convs = [Conv2d(a, b, 3, rng, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])]
        self.out_dim = out_dim

    def forward(self, images) -> Tensor:
        x = as_tensor(images)
        check_image_size(x.shape)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        x = x * 2.0 - 1.0
        for conv in self.convs:
            x = relu(instance_norm(conv(x)))
        return x.reshape(*x.shape[1:]) if squeeze else x


class ImageEncoder(ConvEncoder):
    """Feature network used to build the cost volume (Df channels)."""


class ContextEncoder(ConvEncoder):
    """Separately parameterized network for the source-image context (Dc channels)."""


def encode_features(encoder: ImageEncoder, image) -> Tensor:
    return encoder(image)


def encode_context(encoder: ContextEncoder, image) -> Tensor:
    return encoder(image)
