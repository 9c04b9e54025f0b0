"""Model configuration and named presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from latentflow.errors import ConfigError


@dataclass
class ModelConfig:
    feature_dim: int = 32          # Df, image feature channels
    context_dim: int = 64          # Dc, context feature channels
    encoder_channels: tuple = (32, 64)
    patch_dim: int = 16            # Dp
    num_tokens: int = 4            # K latent tokens per source pixel
    token_dim: int = 32            # D
    num_agt_layers: int = 1
    num_heads: int = 1
    ss_window: int = 2
    num_iters: int = 4
    hidden_dim: int = 96           # Dh, GRU state
    kv_cache: bool = True
    cost_scale: Optional[float] = None   # None -> 1/sqrt(Df)
    token_pe: bool = True
    agt_pe: bool = True
    # Desk cost maps give only 2x2 patch tokens whose key projections differ by
    # ~0.1, so codewords need a large scale for the summarizer softmax to be
    # non-uniform at init; at 0.02 all K tokens of a pixel start identical.
    codeword_std: float = 8.0
    freeze_image_encoder: bool = False
    freeze_context_encoder: bool = False
    query_radius: int = field(default=9, init=False)
    seed: int = 0

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(self.encoder_channels)
        self.validate()

    def validate(self) -> None:
        if self.feature_dim < 1 or self.context_dim < 1:
            raise ConfigError("feature_dim and context_dim must be >= 1")
        if self.patch_dim % 4:
            raise ConfigError(f"patch_dim must be divisible by 4, got {self.patch_dim}")
        if self.num_tokens < 1:
            raise ConfigError("num_tokens must be >= 1")
        if self.token_dim % self.num_heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.token_dim % 4:
            raise ConfigError("token_dim must be divisible by 4 (positional encoding)")
        if self.num_iters < 1:
            raise ConfigError("num_iters must be >= 1")
        if self.codeword_std <= 0:
            raise ConfigError("codeword_std must be > 0")
        if self.ss_window < 1:
            raise ConfigError("ss_window must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("query_radius")
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def desk_config(**overrides) -> ModelConfig:
    """Small CPU-trainable preset (96x96 images, 12x12 cost grid)."""
    return ModelConfig(**overrides)


def full_config(**overrides) -> ModelConfig:
    """Full-size preset: Df=256, Dp=64, K=8 tokens of D=128, three AGT layers."""
    base = dict(feature_dim=256, context_dim=128, encoder_channels=(64, 128), patch_dim=64,
                num_tokens=8, token_dim=128, num_agt_layers=3, num_heads=8, ss_window=7,
                num_iters=12, hidden_dim=128, codeword_std=0.02)
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"desk": desk_config, "full": full_config}
