"""All-pairs cost volume and cost-map cropping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from latentflow.errors import ContractError
from latentflow.ndtensor import Tensor, as_tensor, bilinear_sample, pad


@dataclass
class CostVolume:
    """``data[y, x]`` is the cost map (over target pixels) of source pixel ``(y, x)``."""

    data: Tensor  # [H, W, H, W]
    scale: float

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def maps(self) -> Tensor:
        """All cost maps stacked as ``[H*W, H, W]`` in row-major source order."""
        h, w = self.grid
        return self.data.reshape(h * w, h, w)


@dataclass
class CostPatch:
    values: Tensor  # [r, r]
    center: object  # (x, y)
    radius: int


def build_cost_volume(fs, ft, scale: Optional[float] = None) -> CostVolume:
    """Dot products between every source feature and every target feature.

    ``fs`` and ``ft`` are ``[Df, H, W]``. ``scale`` defaults to ``1/sqrt(Df)``.
    """
    fs, ft = as_tensor(fs), as_tensor(ft)
    if fs.shape != ft.shape:
        raise ContractError(f"feature maps differ in shape: {fs.shape} vs {ft.shape}")
    d, h, w = fs.shape
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    corr = fs.reshape(d, h * w).T @ ft.reshape(d, h * w)
    if scale != 1.0:
        corr = corr * scale
    return CostVolume(corr.reshape(h, w, h, w), float(scale))


def patch_offsets(radius: int) -> np.ndarray:
    """``[r*r, 2]`` (dx, dy) offsets in row-major patch order."""
    if radius % 2 == 0 or radius < 1:
        raise ContractError(f"patch size must be odd, got {radius}")
    c = (radius - 1) // 2
    dy, dx = np.meshgrid(np.arange(-c, c + 1), np.arange(-c, c + 1), indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float64)


def crop_patches(maps, centers, radius: int) -> Tensor:
    """Batched crop: ``maps [B, H, W]``, ``centers [B, 2]`` as (x, y) -> ``[B, r, r]``.

    Bilinear samples, zero outside the map, differentiable in maps and centers.
    """
    maps = as_tensor(maps)
    centers = centers if isinstance(centers, Tensor) else as_tensor(centers, maps.dtype)
    b, h, w = maps.shape
    offs = patch_offsets(radius).astype(maps.dtype)
    points = centers.reshape(b, 1, 2) + offs[None]
    vals = bilinear_sample(maps.reshape(b, 1, h, w), points)
    return vals.reshape(b, radius, radius)


def crop_cost_patch(cost_map, center, radius: int) -> CostPatch:
    cost_map = as_tensor(cost_map)
    center_t = center if isinstance(center, Tensor) else as_tensor(np.asarray(center, dtype=np.float64),
                                                                   cost_map.dtype)
    vals = crop_patches(cost_map.reshape(1, *cost_map.shape), center_t.reshape(1, 2), radius)
    return CostPatch(vals.reshape(radius, radius), center, radius)


def padded_size(n: int) -> int:
    return -(-n // 8) * 8


def pad_cost_map_to_mult8(cost_map) -> Tensor:
    """Zero-pad the last two dims on the bottom/right up to multiples of 8."""
    cost_map = as_tensor(cost_map)
    h, w = cost_map.shape[-2:]
    ph, pw = padded_size(h) - h, padded_size(w) - w
    if ph == 0 and pw == 0:
        return cost_map
    widths = [(0, 0)] * (cost_map.ndim - 2) + [(0, ph), (0, pw)]
    return pad(cost_map, widths)
