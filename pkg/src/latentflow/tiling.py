"""Gaussian-weighted tile inference for inputs larger than the training size."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from latentflow.errors import ConfigError, ContractError
from latentflow.ndtensor import no_grad

SIGMA = 0.05
WEIGHT_FLOOR = 1e-300


@dataclass
class TileLayout:
    train_size: tuple   # (Ht, Wt)
    test_size: tuple    # (Hte, Wte)

    def __post_init__(self):
        ht, wt = self.train_size
        hte, wte = self.test_size
        if ht < 1 or wt < 1:
            raise ConfigError(f"invalid train size {self.train_size}")
        if ht > hte or wt > wte:
            raise ConfigError(f"test size {self.test_size} is smaller than train size {self.train_size}; pad first")
        if hte > 2 * ht or wte > 2 * wt:
            raise ConfigError(f"four corner tiles of {self.train_size} cannot cover {self.test_size}")

    @property
    def origins(self) -> list:
        """Top-left corners (row, col) of the four corner-anchored tiles."""
        ht, wt = self.train_size
        hte, wte = self.test_size
        return [(0, 0), (0, wte - wt), (hte - ht, 0), (hte - ht, wte - wt)]

    @property
    def unique_origins(self) -> list:
        return list(dict.fromkeys(self.origins))


def gaussian_weight_map(ht: int, wt: int, sigma: float = SIGMA) -> np.ndarray:
    """``w(u, v) = exp(-d^2 / (2 sigma^2))``, ``d = ||(u/Ht - 0.5, v/Wt - 0.5)||``, in float64."""
    if ht < 1 or wt < 1:
        raise ConfigError(f"weight map needs positive size, got {ht}x{wt}")
    u = np.arange(ht)[:, None] / ht - 0.5
    v = np.arange(wt)[None, :] / wt - 0.5
    w = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    return np.maximum(w, WEIGHT_FLOOR)


def blend_flows(tile_flows: Sequence[np.ndarray], layout: TileLayout, weights: Optional[np.ndarray] = None,
                origins: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Per-pixel weighted average of tile flows ``[2, Ht, Wt]`` placed at ``origins``.

    Coincident origins are counted once, so a single-tile layout returns that
    tile's flow unchanged.
    """
    ht, wt = layout.train_size
    hte, wte = layout.test_size
    weights = gaussian_weight_map(ht, wt) if weights is None else np.asarray(weights, dtype=np.float64)
    origins = list(layout.origins if origins is None else origins)
    if len(tile_flows) != len(origins):
        raise ContractError(f"{len(tile_flows)} tile flows for {len(origins)} origins")
    placed = dict()
    for (r, c), f in zip(origins, tile_flows):
        placed.setdefault((r, c), np.asarray(f))
    den = np.zeros((hte, wte), dtype=np.float64)
    for r, c in placed:
        den[r:r + ht, c:c + wt] += weights
    if np.any(den <= 0):
        ys, xs = np.nonzero(den <= 0)
        raise ContractError(f"tile layout leaves pixel (row {ys[0]}, col {xs[0]}) uncovered")
    first = next(iter(placed.values()))
    out = np.zeros((first.shape[0], hte, wte), dtype=np.float64)
    for (r, c), f in placed.items():
        alpha = weights / den[r:r + ht, c:c + wt]
        out[:, r:r + ht, c:c + wt] += alpha * f
    return out.astype(first.dtype, copy=False)


def crop_tiles(image: np.ndarray, layout: TileLayout) -> list:
    ht, wt = layout.train_size
    return [image[..., r:r + ht, c:c + wt] for r, c in layout.unique_origins]


def tile_infer(model, image1, image2, train_size: tuple, num_iters: Optional[int] = None) -> np.ndarray:
    """Run the model on the four corner tiles and blend; returns ``[2, Hte, Wte]``."""
    image1, image2 = np.asarray(image1), np.asarray(image2)
    if image1.shape != image2.shape:
        raise ConfigError(f"image shapes differ: {image1.shape} vs {image2.shape}")
    layout = TileLayout(tuple(train_size), image1.shape[-2:])
    for n in (*layout.train_size, *layout.test_size):
        if n % 8:
            raise ConfigError(f"tile and image sizes must be multiples of 8, got {layout.train_size} / {layout.test_size}")
    origins = layout.unique_origins
    flows = []
    with no_grad():
        for a, b in zip(crop_tiles(image1, layout), crop_tiles(image2, layout)):
            flows.append(model(a, b, num_iters=num_iters).final.data)
    return blend_flows(flows, layout, origins=origins)
