"""Masked cost-volume autoencoding: masks, masked tokenization, pretext task, loss.

Mask convention: 1 keeps a cost value, 0 hides it. One mask pyramid is drawn
per rectangular block of source pixels and shared by every pixel in the block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from latentflow.costvolume import CostPatch, CostVolume, crop_patches, pad_cost_map_to_mult8, padded_size
from latentflow.errors import ConfigError, ContractError
from latentflow.ndtensor import MLP, Module, Tensor, as_tensor, backward, mean, no_grad

SMALL_PATCH = 9
LARGE_PATCH = 15
STD_EPS = 1e-6


# -- masks ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockMask:
    """Mask pyramid of one block; ``levels[i]`` is ``B_i``, finest first."""

    levels: tuple  # (B0 [H8, W8], B1, B2, B3 [H8/8, W8/8]) uint8

    @property
    def coarse(self) -> np.ndarray:
        return self.levels[3]


@dataclass
class MaskPyramid:
    grid: tuple                   # source grid (H, W)
    blocks: list                  # BlockMask per block id
    block_assignment: np.ndarray  # [H, W] int block id
    ratio: float

    def mask_for(self, y: int, x: int) -> BlockMask:
        return self.blocks[int(self.block_assignment[y, x])]

    def level(self, i: int) -> np.ndarray:
        """Per-source-pixel stack ``[H*W, ...]`` of mask level ``i`` (row-major order)."""
        stacked = np.stack([b.levels[i] for b in self.blocks])
        return stacked[self.block_assignment.ravel()]

    def per_pixel(self) -> tuple:
        """All four levels as per-pixel stacks, the form the cost encoder consumes."""
        return tuple(self.level(i) for i in range(4))


def upsample2x(m: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(m, 2, axis=-2), 2, axis=-1)


def build_pyramid(b3: np.ndarray) -> tuple:
    b2 = upsample2x(b3)
    b1 = upsample2x(b2)
    b0 = upsample2x(b1)
    return (b0, b1, b2, b3)


def default_block_range(n: int) -> tuple[int, int]:
    return max(2, n // 4), max(3, n // 2)


def _band_sizes(n: int, lo: int, hi: int, rng: np.random.Generator) -> list:
    sizes, total = [], 0
    while total < n:
        s = int(rng.integers(lo, hi + 1))
        s = min(s, n - total)
        sizes.append(s)
        total += s
    return sizes


def generate_block_masks(h: int, w: int, ratio: float = 0.5, block_range: Optional[Sequence[int]] = None,
                         rng: Optional[np.random.Generator] = None, mode: str = "block") -> MaskPyramid:
    """Partition the ``h x w`` source grid into blocks and draw one mask per block.

    ``block_range`` gives (min, max) block sides in grid cells; each B3 mask has
    exactly ``floor(ratio * n)`` zeros. ``mode="random"`` uses 1x1 blocks, so
    every source pixel gets its own mask.
    """
    if h < 1 or w < 1:
        raise ConfigError(f"degenerate grid {h}x{w}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    if mode not in ("block", "random"):
        raise ConfigError(f"unknown masking mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    if mode == "random":
        rows, cols = [1] * h, [1] * w
    else:
        if block_range is None:
            rlo, rhi = default_block_range(h)
            clo, chi = default_block_range(w)
        else:
            lo, hi = (int(v) for v in block_range)
            if lo < 1 or hi < lo:
                raise ConfigError(f"invalid block_range {block_range}")
            rlo, rhi, clo, chi = lo, hi, lo, hi
        rows = _band_sizes(h, rlo, rhi, rng)
        cols = _band_sizes(w, clo, chi, rng)
    h3, w3 = padded_size(h) // 8, padded_size(w) // 8
    n = h3 * w3
    zeros = int(np.floor(ratio * n))
    assignment = np.empty((h, w), dtype=np.int64)
    blocks = []
    y = 0
    for rh in rows:
        x = 0
        for cw in cols:
            flat = np.ones(n, dtype=np.uint8)
            flat[rng.permutation(n)[:zeros]] = 0
            assignment[y:y + rh, x:x + cw] = len(blocks)
            blocks.append(BlockMask(build_pyramid(flat.reshape(h3, w3))))
            x += cw
        y += rh
    return MaskPyramid((h, w), blocks, assignment, ratio)


def full_masks(h: int, w: int) -> MaskPyramid:
    """A single all-ones block covering the grid."""
    b3 = np.ones((padded_size(h) // 8, padded_size(w) // 8), dtype=np.uint8)
    return MaskPyramid((h, w), [BlockMask(build_pyramid(b3))], np.zeros((h, w), dtype=np.int64), 0.0)


def masked_patchify(maps_padded, masks: Sequence[np.ndarray], encoder) -> tuple[Tensor, np.ndarray]:
    """Masked patch tokens ``[P, n, Dp]`` and their visibility ``[P, n]``.

    Uses the cost encoder's own patchify kernels; ``masks`` is the per-pixel
    level tuple ``(B0, B1, B2, B3)``.
    """
    maps_padded = as_tensor(maps_padded)
    if np.asarray(masks[0]).shape[-2:] != maps_padded.shape[-2:]:
        raise ContractError(f"B0 shape {np.asarray(masks[0]).shape} != cost map shape {maps_padded.shape}")
    return encoder.patch_tokens(maps_padded, masks)


def dump_masks(pyramid: MaskPyramid, out_dir, level: int = 0) -> list:
    """Write each block's mask level as an 8-bit grayscale PGM; returns the paths."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, block in enumerate(pyramid.blocks):
        p = out / f"block{i:03d}_B{level}.pgm"
        Image.fromarray((block.levels[level] * 255).astype(np.uint8), mode="L").save(p)
        paths.append(p)
    return paths


# -- pretext samples ------------------------------------------------------------------

@dataclass
class PretextSample:
    center: np.ndarray         # o_x as (x, y)
    small: CostPatch           # 9x9 query crop
    large: CostPatch           # 15x15 target crop
    large_normalized: Tensor   # [225]


@dataclass
class PretextBatch:
    centers: np.ndarray        # [P, 2]
    small: Tensor              # [P, 9, 9]
    large: Tensor              # [P, 15, 15]
    target: Tensor             # [P, 225] standardized large crop


def standardize(x, eps: float = STD_EPS):
    """Per-row ``(x - mean) / (std + eps)`` on ``[B, n]``; arrays or tensors."""
    if isinstance(x, Tensor):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var ** 0.5 + eps)
    x = np.asarray(x)
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / (x.std(axis=-1, keepdims=True) + eps)


def sample_centers(n: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.uniform(0, w - 1, size=n), rng.uniform(0, h - 1, size=n)], axis=-1)


def sample_pretext(cost_map, rng: np.random.Generator, query_map=None) -> PretextSample:
    """One pretext sample from a single ``[H, W]`` cost map.

    The 15x15 target is always cropped from ``cost_map``; the 9x9 query comes
    from ``query_map`` when given (the masked map during pretraining).
    """
    cost_map = as_tensor(cost_map)
    h, w = cost_map.shape
    batch = sample_pretext_batch(cost_map.reshape(1, h, w), rng,
                                 None if query_map is None else as_tensor(query_map).reshape(1, h, w))
    c = batch.centers[0]
    return PretextSample(c, CostPatch(batch.small.reshape(SMALL_PATCH, SMALL_PATCH), c, SMALL_PATCH),
                         CostPatch(batch.large.reshape(LARGE_PATCH, LARGE_PATCH), c, LARGE_PATCH),
                         batch.target.reshape(LARGE_PATCH * LARGE_PATCH))


def sample_pretext_batch(maps, rng: np.random.Generator, query_maps=None,
                         centers: Optional[np.ndarray] = None) -> PretextBatch:
    """Pretext crops for every map in ``maps [P, H, W]`` at random centers."""
    maps = as_tensor(maps)
    p, h, w = maps.shape
    if centers is None:
        centers = sample_centers(p, h, w, rng)
    qmaps = maps if query_maps is None else as_tensor(query_maps)
    with no_grad():
        large = crop_patches(maps, centers, LARGE_PATCH)
        small = crop_patches(qmaps, centers, SMALL_PATCH)
    target = as_tensor(standardize(large.data.reshape(p, -1).astype(np.float64)), maps.dtype)
    return PretextBatch(centers, small, large, target)


# -- reconstruction head and loss -------------------------------------------------------

class ReconstructionHead(Module):
    """Three-layer MLP mapping a decoded cost feature to a 15x15 patch."""

    def __init__(self, dim: int, rng: np.random.Generator, depth: int = 3):
        if depth < 1:
            raise ConfigError("head depth must be >= 1")
        dims = [dim] * depth + [LARGE_PATCH * LARGE_PATCH]
        self.mlp = MLP(dims, rng)

    @property
    def layers(self) -> list:
        return self.mlp.layers

    def forward(self, c: Tensor) -> Tensor:
        return self.mlp(c)


@dataclass
class MCVAConfig:
    ratio: float = 0.5
    block_range: Optional[tuple] = None
    mode: str = "block"                 # "block" | "random"
    query_source: str = "masked"        # "masked" | "raw"
    loss_mode: str = "target"           # "target" normalizes qL; "equation" normalizes the prediction
    head_depth: int = 3
    freeze_context_encoder: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.query_source not in ("masked", "raw"):
            raise ConfigError(f"query_source must be 'masked' or 'raw', got {self.query_source!r}")
        if self.loss_mode not in ("target", "equation"):
            raise ConfigError(f"loss_mode must be 'target' or 'equation', got {self.loss_mode!r}")
        if self.mode not in ("block", "random"):
            raise ConfigError(f"mode must be 'block' or 'random', got {self.mode!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"ratio must be in (0, 1), got {self.ratio}")


def masked_query_maps(maps: Tensor, masks: Sequence[np.ndarray]) -> Tensor:
    """Cost maps with hidden entries zeroed, cropped back to the unpadded extent."""
    p, h, w = maps.shape
    b0 = np.asarray(masks[0])[:, :h, :w].astype(maps.dtype)
    return maps * b0


def predict_patches(decoder, head: ReconstructionHead, tokens: Tensor, small: Tensor,
                    centers: np.ndarray) -> Tensor:
    """Decoder query from the 9x9 crop, cross-attention into ``tokens [P, K, D]``, head -> ``[P, 225]``."""
    q = decoder.embed_query(small, as_tensor(centers, small.dtype))
    return head(decoder.cross_attend(q, tokens))


def pretext_loss(pred: Tensor, batch: PretextBatch, mode: str = "target") -> Tensor:
    """MSE over pixels and patch entries."""
    if mode == "target":
        diff = pred - batch.target
    elif mode == "equation":
        p = batch.large.shape[0]
        diff = standardize(pred) - batch.large.reshape(p, LARGE_PATCH * LARGE_PATCH)
    else:
        raise ConfigError(f"unknown loss mode {mode!r}")
    return mean(diff * diff)


@dataclass
class PretextForward:
    loss: Tensor
    pred: Tensor
    memory: Tensor      # [H, W, K, D]
    batch: PretextBatch
    masks: MaskPyramid


def pretext_forward(model, head: ReconstructionHead, cv: CostVolume, context, rng: np.random.Generator,
                    cfg: MCVAConfig, masks: Optional[MaskPyramid] = None,
                    centers: Optional[np.ndarray] = None) -> PretextForward:
    h, w = cv.grid
    if masks is None:
        masks = generate_block_masks(h, w, cfg.ratio, cfg.block_range, rng, cfg.mode)
    levels = masks.per_pixel()
    maps = cv.maps()
    memory = model.cost_encoder(cv, context, levels).tokens
    qmaps = masked_query_maps(maps, levels) if cfg.query_source == "masked" else None
    batch = sample_pretext_batch(maps, rng, qmaps, centers)
    pred = predict_patches(model.decoder, head, memory.reshape(h * w, *memory.shape[2:]),
                           batch.small, batch.centers)
    return PretextForward(pretext_loss(pred, batch, cfg.loss_mode), pred, memory, batch, masks)


def check_pretrain_freezing(model) -> None:
    if not model.cfg.freeze_image_encoder:
        raise ConfigError("MCVA pretraining requires freeze_image_encoder=true: training the image "
                          "encoder against the reconstruction task diverges")


def pretrain_step(image1, image2, model, head: ReconstructionHead, optimizer, rng: np.random.Generator,
                  cfg: Optional[MCVAConfig] = None) -> float:
    """One MCVA update on an image pair; returns the loss value."""
    cfg = cfg or MCVAConfig()
    check_pretrain_freezing(model)
    cv, context = model.encode(image1, image2)
    out = pretext_forward(model, head, cv, context, rng, cfg)
    value = out.loss.item()
    optimizer.zero_grad()
    backward(out.loss)
    optimizer.step()
    return value


def pretrained_state(model, head: ReconstructionHead) -> dict:
    """Model parameters plus the head under the ``head.`` prefix."""
    state = model.state_dict()
    state.update(head.state_dict("head."))
    return state
