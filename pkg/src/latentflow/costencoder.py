"""Cost-volume encoder: cost maps -> patch features -> K latent tokens -> AGT layers.

Layouts used throughout:

* cost maps ``[P, H, W]`` with ``P = H*W`` source pixels in row-major order
* latent tokens ``[H, W, K, D]`` (the cost memory)
* per-latent groups for inter-cost-map attention ``[K, H, W, D]``
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from latentflow.attention import attention
from latentflow.config import ModelConfig
from latentflow.costvolume import CostVolume, pad_cost_map_to_mult8
from latentflow.errors import ConfigError, ContractError
from latentflow.ndtensor import (
    MLP,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    cos,
    pad,
    relu,
    sin,
    stack,
    where,
)


@dataclass
class CostMemory:
    tokens: Tensor  # [H, W, K, D]

    @property
    def shape(self) -> tuple:
        return self.tokens.shape


# -- positional encoding ----------------------------------------------------------

def pe_frequencies(dim: int) -> np.ndarray:
    if dim % 4:
        raise ConfigError(f"positional encoding dim must be divisible by 4, got {dim}")
    return 1.0 / 10000.0 ** (4.0 * np.arange(dim // 4) / dim)


def positional_encoding(p, dim: int):
    """2-D sinusoidal embedding of ``(x, y)`` coordinates in ``p [..., 2]``.

    Layout: ``[sin(w0 x), cos(w0 x), sin(w1 x), ..., sin(w0 y), cos(w0 y), ...]``
    with ``w_k = 10000^(-4k/dim)``. Arrays in give arrays out; tensors in give
    a differentiable tensor.
    """
    omega = pe_frequencies(dim)
    if isinstance(p, Tensor):
        ang = p.reshape(*p.shape, 1) * omega.astype(p.dtype)
        out = stack([sin(ang), cos(ang)], axis=-1)
        return out.reshape(*p.shape[:-1], dim)
    p = np.asarray(p, dtype=np.float64)
    ang = p[..., None] * omega
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*p.shape[:-1], dim)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """``[h, w, 2]`` integer (x, y) coordinates."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def patch_centers(h3: int, w3: int) -> np.ndarray:
    """Centers of the 8x8 cost-map patches in cost-map pixel units, ``[h3, w3, 2]``."""
    return pixel_grid(h3, w3) * 8.0 + 3.5


# -- tokenization -------------------------------------------------------------------

class Patchify(Module):
    """Three stride-2 convolutions with channels Dp/4, Dp/2, Dp.

    Each stage computes ``conv(relu(x * mask))``; without masks this is the
    plain patch embedding, with masks it is the masked tokenization used in
    pretraining (the same kernels serve both).
    """

    def __init__(self, patch_dim: int, rng: np.random.Generator):
        if patch_dim % 4:
            raise ConfigError(f"patch_dim must be divisible by 4, got {patch_dim}")
        chans = [1, patch_dim // 4, patch_dim // 2, patch_dim]
        self.convs = [Conv2d(a, b, 2, rng, stride=2, padding=0) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, maps_padded, masks: Optional[Sequence[np.ndarray]] = None) -> Tensor:
        """``maps_padded [B, H8, W8]`` -> ``[B, H8/8, W8/8, Dp]``.

        ``masks`` are the three finer mask levels, each broadcastable to
        ``[B, 1, H8/2^i, W8/2^i]`` (1 = visible).
        """
        x = as_tensor(maps_padded)
        b, h8, w8 = x.shape
        if h8 % 8 or w8 % 8:
            raise ContractError(f"cost maps must be padded to multiples of 8, got {h8}x{w8}")
        x = x.reshape(b, 1, h8, w8)
        for i, conv in enumerate(self.convs):
            if masks is not None:
                m = np.asarray(masks[i], dtype=x.dtype)
                if m.shape[-2:] != x.shape[-2:]:
                    raise ContractError(f"mask level {i} shape {m.shape} does not match features {x.shape}")
                x = x * m.reshape(m.shape[0], 1, *m.shape[-2:])
            x = conv(relu(x))
        return x.transpose(0, 2, 3, 1)


class LatentSummarizer(Module):
    """Cross-attention from K shared codewords onto one cost map's patch tokens."""

    def __init__(self, patch_dim: int, token_dim: int, num_tokens: int, num_heads: int,
                 rng: np.random.Generator, codeword_std: float = 0.02):
        self.codewords = Parameter(rng.normal(0.0, codeword_std, size=(num_tokens, token_dim)))
        self.key = Linear(2 * patch_dim, token_dim, rng)
        self.value = Linear(2 * patch_dim, token_dim, rng)
        self.null_token = Parameter(rng.normal(0.0, 0.02, size=(2 * patch_dim,)))
        self.num_heads = num_heads

    def forward(self, feats: Tensor, pe: np.ndarray, visible: Optional[np.ndarray] = None) -> Tensor:
        """``feats [B, n, Dp]`` + ``pe [n, Dp]`` -> ``[B, K, D]``.

        ``visible [B, n]`` drops tokens from the key set. A map with no
        visible token is summarized by the value projection of a learned
        null token.
        """
        b, n, dp = feats.shape
        pe_b = np.broadcast_to(np.asarray(pe, dtype=feats.dtype), (b, n, dp))
        x = concat([feats, as_tensor(pe_b, feats.dtype)], axis=-1)
        keys, vals = self.key(x), self.value(x)
        if visible is None:
            return attention(self.codewords, keys, vals, self.num_heads)
        visible = np.asarray(visible, dtype=bool)
        empty = ~visible.any(axis=-1)
        mask = np.where(empty[:, None], True, visible)
        out = attention(self.codewords, keys, vals, self.num_heads, key_mask=mask)
        if empty.any():
            null = self.value(self.null_token.reshape(1, -1))
            out = where(empty[:, None, None], broadcast_to(null, out.shape), out)
        return out


# -- AGT layers --------------------------------------------------------------------

class IntraCostAttention(Module):
    """Pre-norm self-attention over the K tokens of each source pixel, then FFN."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.q, self.k, self.v, self.proj = (Linear(dim, dim, rng) for _ in range(4))
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, 4 * dim, dim], rng)
        self.num_heads = num_heads

    def forward(self, tokens: Tensor) -> Tensor:
        """``tokens [P, K, D]`` -> ``[P, K, D]``."""
        y = self.norm1(tokens)
        x = tokens + self.proj(attention(self.q(y), self.k(y), self.v(y), self.num_heads))
        return x + self.ffn(self.norm2(x))


def _tile_layout(h: int, w: int, ws: int) -> tuple[int, int]:
    return -(-h // ws), -(-w // ws)


class _SpatialBlock(Module):
    def __init__(self, dim: int, ctx_dim: int, num_heads: int, window: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim + ctx_dim, dim, rng)
        self.k = Linear(dim + ctx_dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, 4 * dim, dim], rng)
        self.num_heads = num_heads
        self.window = window

    def _inputs(self, x: Tensor, ctx: Tensor):
        g, h, w, d = x.shape
        y = self.norm1(x)
        c = broadcast_to(ctx.reshape(1, *ctx.shape), (g, h, w, ctx.shape[-1]))
        return y, concat([y, c], axis=-1)

    def _finish(self, x: Tensor, attended: Tensor) -> Tensor:
        x = x + self.proj(attended)
        return x + self.ffn(self.norm2(x))

    def _windows(self, t: Tensor) -> Tensor:
        """``[G, H, W, C]`` -> zero-padded ``[G, nh, nw, ws*ws, C]``."""
        g, h, w, c = t.shape
        ws = self.window
        nh, nw = _tile_layout(h, w, ws)
        if nh * ws != h or nw * ws != w:
            t = pad(t, ((0, 0), (0, nh * ws - h), (0, nw * ws - w), (0, 0)))
        t = t.reshape(g, nh, ws, nw, ws, c).transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(g, nh, nw, ws * ws, c)

    def _valid(self, h: int, w: int) -> np.ndarray:
        """``[nh, nw, ws*ws]`` True where a window slot holds a real token."""
        ws = self.window
        nh, nw = _tile_layout(h, w, ws)
        valid = np.zeros((nh * ws, nw * ws), dtype=bool)
        valid[:h, :w] = True
        return valid.reshape(nh, ws, nw, ws).transpose(0, 2, 1, 3).reshape(nh, nw, ws * ws)


class LocalWindowAttention(_SpatialBlock):
    """Self-attention restricted to non-overlapping ws x ws tiles."""

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        g, h, w, d = x.shape
        ws = self.window
        nh, nw = _tile_layout(h, w, ws)
        y, cat = self._inputs(x, ctx)
        q = self._windows(self.q(cat))
        k = self._windows(self.k(cat))
        v = self._windows(self.v(y))
        valid = self._valid(h, w)
        mask = None if valid.all() else valid
        a = attention(q, k, v, self.num_heads, key_mask=mask)  # [G, nh, nw, ws*ws, D]
        a = a.reshape(g, nh, nw, ws, ws, d).transpose(0, 1, 3, 2, 4, 5).reshape(g, nh * ws, nw * ws, d)
        if nh * ws != h or nw * ws != w:
            a = a[:, :h, :w]
        return self._finish(x, a)


class GlobalPooledAttention(_SpatialBlock):
    """Every token attends to one mean-pooled summary per ws x ws tile."""

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        g, h, w, d = x.shape
        y, cat = self._inputs(x, ctx)
        valid = self._valid(h, w)
        counts = valid.sum(axis=-1).astype(x.dtype)[None, :, :, None]  # [1, nh, nw, 1]
        pooled_cat = self._windows(cat).sum(axis=3) / counts
        pooled_y = self._windows(y).sum(axis=3) / counts
        nt = pooled_cat.shape[1] * pooled_cat.shape[2]
        k = self.k(pooled_cat.reshape(g, nt, pooled_cat.shape[-1]))
        v = self.v(pooled_y.reshape(g, nt, d))
        q = self.q(cat).reshape(g, h * w, d)
        a = attention(q, k, v, self.num_heads).reshape(g, h, w, d)
        return self._finish(x, a)


class InterCostAttention(Module):
    """Spatially separable self-attention over each latent group's H x W tokens.

    Queries and keys see ``Concat(token, context)``; values see tokens only.
    """

    def __init__(self, dim: int, ctx_dim: int, num_heads: int, window: int, rng: np.random.Generator):
        self.local = LocalWindowAttention(dim, ctx_dim, num_heads, window, rng)
        self.glob = GlobalPooledAttention(dim, ctx_dim, num_heads, window, rng)

    def forward(self, groups: Tensor, ctx: Tensor) -> Tensor:
        """``groups [K, H, W, D]``, ``ctx [H, W, Dc]`` -> ``[K, H, W, D]``."""
        return self.glob(self.local(groups, ctx), ctx)


class AGTLayer(Module):
    def __init__(self, dim: int, ctx_dim: int, num_heads: int, window: int, rng: np.random.Generator):
        self.intra = IntraCostAttention(dim, num_heads, rng)
        self.inter = InterCostAttention(dim, ctx_dim, num_heads, window, rng)

    def forward(self, tokens: Tensor, ctx: Tensor, pe: Optional[np.ndarray] = None) -> Tensor:
        """``tokens [H, W, K, D]``; ``pe [H, W, D]`` is added before the inter stage."""
        h, w, k, d = tokens.shape
        x = self.intra(tokens.reshape(h * w, k, d)).reshape(h, w, k, d)
        if pe is not None:
            x = x + pe[:, :, None, :].astype(x.dtype)
        x = self.inter(x.transpose(2, 0, 1, 3), ctx)
        return x.transpose(1, 2, 0, 3)


class CostEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.patchify = Patchify(cfg.patch_dim, rng)
        self.summarizer = LatentSummarizer(cfg.patch_dim, cfg.token_dim, cfg.num_tokens, cfg.num_heads, rng,
                                           cfg.codeword_std)
        self.layers = [AGTLayer(cfg.token_dim, cfg.context_dim, cfg.num_heads, cfg.ss_window, rng)
                       for _ in range(cfg.num_agt_layers)]
        self.patch_dim = cfg.patch_dim
        self.token_dim = cfg.token_dim
        self.token_pe = cfg.token_pe
        self.agt_pe = cfg.agt_pe

    def tokenize(self, cost_volume: CostVolume, masks: Optional[Sequence[np.ndarray]] = None) -> Tensor:
        """Patchify + latent summarization for every cost map -> ``[H, W, K, D]``.

        ``masks`` holds per-pixel mask levels ``(B0, B1, B2, B3)`` with shapes
        ``[P, H8/2^i, W8/2^i]``; tokens where B3 is 0 are dropped.
        """
        h, w = cost_volume.grid
        maps = pad_cost_map_to_mult8(cost_volume.maps())
        feats, visible = self.patch_tokens(maps, masks)
        p, n, dp = feats.shape
        h3, w3 = maps.shape[1] // 8, maps.shape[2] // 8
        if self.token_pe:
            pe = positional_encoding(patch_centers(h3, w3), dp).reshape(n, dp)
        else:
            pe = np.zeros((n, dp))
        tokens = self.summarizer(feats, pe, visible)
        return tokens.reshape(h, w, *tokens.shape[1:])

    def patch_tokens(self, maps_padded, masks=None) -> tuple[Tensor, Optional[np.ndarray]]:
        """``[P, n, Dp]`` patch tokens and (under masks) their ``[P, n]`` visibility."""
        f = self.patchify(maps_padded, None if masks is None else masks[:3])
        p, h3, w3, dp = f.shape
        feats = f.reshape(p, h3 * w3, dp)
        visible = None if masks is None else np.asarray(masks[3]).reshape(p, h3 * w3) > 0
        return feats, visible

    def encode(self, tokens: Tensor, context) -> Tensor:
        """Run the AGT stack on ``[H, W, K, D]`` tokens with context ``[Dc, H, W]``."""
        h, w = tokens.shape[:2]
        ctx = as_tensor(context)
        if ctx.shape[1:] != (h, w):
            raise ContractError(f"context grid {ctx.shape[1:]} != cost grid {(h, w)}")
        ctx = ctx.transpose(1, 2, 0)
        pe = positional_encoding(pixel_grid(h, w), self.token_dim) if self.agt_pe else None
        for layer in self.layers:
            tokens = layer(tokens, ctx, pe)
        return tokens

    def forward(self, cost_volume: CostVolume, context, masks=None) -> CostMemory:
        return CostMemory(self.encode(self.tokenize(cost_volume, masks), context))


def encode_cost_memory(cost_volume: CostVolume, context, encoder: CostEncoder, masks=None) -> CostMemory:
    return encoder(cost_volume, context, masks)
