"""Recurrent flow decoder over the cost memory.

Each iteration crops a 9x9 cost patch around the current correspondence
``p = x + f(x)``, embeds it as a query, cross-attends into the pixel's latent
tokens, and feeds the result to a ConvGRU that predicts a flow residual. Every
iterate is convex-upsampled to full resolution.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from latentflow.attention import attention
from latentflow.costencoder import CostMemory, pixel_grid, positional_encoding
from latentflow.costvolume import CostPatch, CostVolume, crop_patches
from latentflow.errors import ConfigError, ContractError
from latentflow.ndtensor import (
    MLP,
    Conv2d,
    Module,
    Tensor,
    as_tensor,
    concat,
    debug_enabled,
    relu,
    sigmoid,
    softmax_lastdim,
    tanh,
)

QUERY_RADIUS = 9
UPSAMPLE = 8


@dataclass
class FlowField:
    f: Tensor        # [2, H, W] in 1/8-resolution pixels
    hidden: Tensor   # [Dh, H, W]


@dataclass
class DecoderConfig:
    num_iters: int = 4
    hidden_dim: int = 96
    kv_cache: bool = True
    query_radius: int = field(default=QUERY_RADIUS, init=False)

    def __post_init__(self):
        if self.num_iters < 1:
            raise ConfigError("num_iters must be >= 1")


@dataclass
class DecoderOutput:
    flows: list        # full-resolution [2, 8H, 8W] per iteration
    coarse: list       # [2, H, W] per iteration
    state: Optional[FlowField] = None


def _digest(arr: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


class KVCache:
    """Keys/values of the cost memory, computed once and reused across iterations.

    In debug mode the memory's content hash is recorded and re-checked on every
    lookup so a cache built from different tokens is caught.
    """

    def __init__(self, keys: Tensor, values: Tensor, tokens: Tensor):
        self.keys = keys
        self.values = values
        self._source = tokens
        self._digest = _digest(tokens.data) if debug_enabled() else None

    def check(self, tokens: Tensor) -> None:
        if tokens.shape != self._source.shape:
            raise ContractError(f"KV cache built for tokens {self._source.shape}, got {tokens.shape}")
        if self._digest is not None and _digest(tokens.data) != self._digest:
            raise ContractError("KV cache is stale: cost memory contents changed")


class FlowDecoder(Module):
    def __init__(self, token_dim: int, context_dim: int, hidden_dim: int, rng: np.random.Generator,
                 flow_feat_dim: int = 32, head_dim: int = 128):
        d, r2 = token_dim, QUERY_RADIUS * QUERY_RADIUS
        self.patch_embed = MLP([r2, d, d], rng)
        self.query_embed = MLP([d, d, d], rng)
        self.key_ffn = MLP([d, d, d], rng)
        self.value_ffn = MLP([d, d, d], rng)
        self.context_proj = Conv2d(context_dim, hidden_dim + context_dim, 1, rng)
        self.flow_enc = [Conv2d(2, flow_feat_dim, 3, rng), Conv2d(flow_feat_dim, flow_feat_dim, 3, rng)]
        in_dim = hidden_dim + d + r2 + flow_feat_dim + context_dim
        self.gate_conv = Conv2d(in_dim, 2 * hidden_dim, 3, rng)
        self.cand_conv = Conv2d(in_dim, hidden_dim, 3, rng)
        self.flow_head = [Conv2d(hidden_dim, head_dim, 3, rng), Conv2d(head_dim, 2, 3, rng)]
        self.mask_head = [Conv2d(hidden_dim, head_dim, 3, rng), Conv2d(head_dim, 9 * UPSAMPLE ** 2, 1, rng)]
        self.token_dim = token_dim
        self.context_dim = context_dim
        self.hidden_dim = hidden_dim

    # -- query / attention -----------------------------------------------------

    def embed_query(self, patches: Tensor, centers: Tensor) -> Tensor:
        """``patches [B, 9, 9]``, ``centers [B, 2]`` -> ``Q [B, D]``."""
        b = patches.shape[0]
        inner = self.patch_embed(patches.reshape(b, QUERY_RADIUS * QUERY_RADIUS))
        return self.query_embed(inner + positional_encoding(centers, self.token_dim))

    def build_kv(self, tokens: Tensor) -> KVCache:
        """``tokens [P, K, D]`` -> cache of ``FFN_k(T)``, ``FFN_v(T)``."""
        return KVCache(self.key_ffn(tokens), self.value_ffn(tokens), tokens)

    def cross_attend(self, queries: Tensor, tokens: Tensor, cache: Optional[KVCache] = None) -> Tensor:
        """``queries [P, D]`` against each pixel's K tokens -> ``c [P, D]``."""
        if cache is None:
            cache = self.build_kv(tokens)
        else:
            cache.check(tokens)
        p, d = queries.shape
        c = attention(queries.reshape(p, 1, d), cache.keys, cache.values)
        return c.reshape(p, d)

    # -- recurrent update ------------------------------------------------------

    def init_state(self, context) -> tuple[Tensor, Tensor]:
        """Split context into the initial hidden state and the per-iteration input."""
        ctx = self.context_proj(as_tensor(context))
        return tanh(ctx[:self.hidden_dim]), relu(ctx[self.hidden_dim:])

    def encode_flow(self, f: Tensor) -> Tensor:
        x = f
        for conv in self.flow_enc:
            x = relu(conv(x))
        return x

    def gru_update(self, c: Tensor, q: Tensor, inp: Tensor, f: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        """One ConvGRU step; all inputs are ``[C, H, W]``. Returns ``(delta_f, h_new)``."""
        x = concat([c, q, self.encode_flow(f), inp], axis=0)
        hx = concat([h, x], axis=0)
        gates = sigmoid(self.gate_conv(hx))
        z, r = gates[:self.hidden_dim], gates[self.hidden_dim:]
        cand = tanh(self.cand_conv(concat([r * h, x], axis=0)))
        h_new = (1.0 - z) * h + z * cand
        return self.predict_delta(h_new), h_new

    def predict_delta(self, h: Tensor) -> Tensor:
        return self.flow_head[1](relu(self.flow_head[0](h)))

    def upsample_logits(self, h: Tensor) -> Tensor:
        return self.mask_head[1](relu(self.mask_head[0](h))) * 0.25

    # -- full loop -------------------------------------------------------------

    def forward(self, cost_volume: CostVolume, memory: CostMemory, context,
                num_iters: int = 4, kv_cache: bool = True) -> DecoderOutput:
        h_grid, w_grid = cost_volume.grid
        tokens = memory.tokens
        if tokens.shape[:2] != (h_grid, w_grid):
            raise ContractError(f"cost memory grid {tokens.shape[:2]} != cost volume grid {(h_grid, w_grid)}")
        p = h_grid * w_grid
        flat_tokens = tokens.reshape(p, *tokens.shape[2:])
        maps = cost_volume.maps()
        grid = pixel_grid(h_grid, w_grid).reshape(p, 2).astype(maps.dtype)
        cache = self.build_kv(flat_tokens) if kv_cache else None
        h, inp = self.init_state(context)
        f = as_tensor(np.zeros((2, h_grid, w_grid), dtype=maps.dtype))
        flows, coarse = [], []
        for _ in range(num_iters):
            centers = f.reshape(2, p).transpose(1, 0) + grid
            patches = crop_patches(maps, centers, QUERY_RADIUS)
            queries = self.embed_query(patches, centers)
            c = self.cross_attend(queries, flat_tokens, cache)
            c_map = c.transpose(1, 0).reshape(self.token_dim, h_grid, w_grid)
            q_map = patches.reshape(p, QUERY_RADIUS ** 2).transpose(1, 0).reshape(-1, h_grid, w_grid)
            delta, h = self.gru_update(c_map, q_map, inp, f, h)
            f = f + delta
            coarse.append(f)
            flows.append(convex_upsample(f, self.upsample_logits(h)))
        return DecoderOutput(flows, coarse, FlowField(f, h))


def convex_upsample(f: Tensor, logits: Tensor, factor: int = UPSAMPLE) -> Tensor:
    """``f [2, H, W]`` + ``logits [9*factor^2, H, W]`` -> ``[2, factor*H, factor*W]``.

    Each output subpixel takes a softmax-weighted combination of the 3x3
    coarse neighborhood (edge-replicated at the border), scaled by ``factor``.
    """
    _, h, w = f.shape
    s2 = factor * factor
    if logits.shape != (9 * s2, h, w):
        raise ContractError(f"upsample logits {logits.shape} != {(9 * s2, h, w)}")
    weights = softmax_lastdim(logits.reshape(9, s2, h, w).transpose(2, 3, 1, 0))   # [H, W, s2, 9]
    neigh = gather_neighbors(f)                                                     # [H, W, 9, 2]
    up = (weights @ neigh) * float(factor)                                          # [H, W, s2, 2]
    up = up.reshape(h, w, factor, factor, 2).transpose(4, 0, 2, 1, 3)
    return up.reshape(2, factor * h, factor * w)


def neighbor_index(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices ``[H, W, 9]`` of each cell's 3x3 neighborhood, clamped at edges."""
    dy, dx = np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="ij")
    ys = np.clip(np.arange(h)[:, None, None] + dy.ravel()[None, None, :], 0, h - 1)
    xs = np.clip(np.arange(w)[None, :, None] + dx.ravel()[None, None, :], 0, w - 1)
    return np.broadcast_to(ys, (h, w, 9)), np.broadcast_to(xs, (h, w, 9))


def gather_neighbors(f: Tensor) -> Tensor:
    _, h, w = f.shape
    iy, ix = neighbor_index(h, w)
    return f.transpose(1, 2, 0)[iy, ix]


# -- functional entry points ---------------------------------------------------------

def build_cost_query(decoder: FlowDecoder, cost_map, center) -> tuple[Tensor, CostPatch]:
    """Single-pixel query: ``cost_map [H, W]``, ``center`` (x, y) -> ``(Q [1, D], 9x9 patch)``."""
    cost_map = as_tensor(cost_map)
    c = center if isinstance(center, Tensor) else as_tensor(np.asarray(center, dtype=np.float64), cost_map.dtype)
    c = c.reshape(1, 2)
    patch = crop_patches(cost_map.reshape(1, *cost_map.shape), c, QUERY_RADIUS)
    q = decoder.embed_query(patch, c)
    return q, CostPatch(patch.reshape(QUERY_RADIUS, QUERY_RADIUS), center, QUERY_RADIUS)


def decode_cost_feature(decoder: FlowDecoder, query: Tensor, tokens: Tensor,
                        cache: Optional[KVCache] = None) -> Tensor:
    """Single-pixel cross-attention: ``query [1, D]``, ``tokens [K, D]`` -> ``c [D]``."""
    k, d = tokens.shape
    t = tokens.reshape(1, k, d)
    return decoder.cross_attend(query.reshape(1, d), t, cache).reshape(d)


def run_decoder(cost_volume: CostVolume, memory: CostMemory, context, decoder: FlowDecoder,
                cfg: Optional[DecoderConfig] = None) -> list:
    cfg = cfg or DecoderConfig()
    return decoder(cost_volume, memory, context, cfg.num_iters, cfg.kv_cache).flows
