"""End-to-end flow model: encoders, cost volume, cost encoder, recurrent decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from latentflow.config import ModelConfig
from latentflow.costencoder import CostEncoder, CostMemory
from latentflow.costvolume import CostVolume, build_cost_volume
from latentflow.decoder import FlowDecoder
from latentflow.encoders import ContextEncoder, ImageEncoder
from latentflow.ndtensor import Module, Tensor, as_tensor, stack


@dataclass
class FlowPrediction:
    flows: list              # full-resolution iterates [2, H_I, W_I]
    coarse: list             # 1/8-resolution iterates [2, H, W]
    cost_volume: CostVolume
    memory: CostMemory
    context: Tensor

    @property
    def final(self) -> Tensor:
        return self.flows[-1]


class FlowModel(Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.image_encoder = ImageEncoder(cfg.feature_dim, rng, cfg.encoder_channels)
        self.context_encoder = ContextEncoder(cfg.context_dim, rng, cfg.encoder_channels)
        self.cost_encoder = CostEncoder(cfg, rng)
        self.decoder = FlowDecoder(cfg.token_dim, cfg.context_dim, cfg.hidden_dim, rng)
        self.apply_freezing()

    def apply_freezing(self) -> None:
        for enc, frozen in ((self.image_encoder, self.cfg.freeze_image_encoder),
                            (self.context_encoder, self.cfg.freeze_context_encoder)):
            enc.freeze() if frozen else enc.unfreeze()

    def set_frozen(self, image_encoder: bool, context_encoder: bool) -> None:
        self.cfg = self.cfg.replace(freeze_image_encoder=image_encoder, freeze_context_encoder=context_encoder)
        self.apply_freezing()

    def encode(self, image1, image2) -> tuple[CostVolume, Tensor]:
        """Cost volume and source context for one image pair."""
        image1, image2 = as_tensor(image1), as_tensor(image2)
        feats = self.image_encoder(stack([image1, image2]))
        context = self.context_encoder(image1)
        return build_cost_volume(feats[0], feats[1], self.cfg.cost_scale), context

    def forward(self, image1, image2, num_iters: Optional[int] = None,
                kv_cache: Optional[bool] = None) -> FlowPrediction:
        cv, context = self.encode(image1, image2)
        return self.decode(cv, context, num_iters, kv_cache)

    def decode(self, cv: CostVolume, context: Tensor, num_iters: Optional[int] = None,
               kv_cache: Optional[bool] = None, masks=None) -> FlowPrediction:
        memory = self.cost_encoder(cv, context, masks)
        out = self.decoder(cv, memory, context,
                           self.cfg.num_iters if num_iters is None else num_iters,
                           self.cfg.kv_cache if kv_cache is None else kv_cache)
        return FlowPrediction(out.flows, out.coarse, cv, memory, context)

