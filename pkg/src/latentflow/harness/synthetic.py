"""Synthetic image pairs with exact ground-truth flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from latentflow.errors import ConfigError

MOTION_KINDS = ("constant", "affine", "smooth")


@dataclass
class SyntheticSample:
    image1: np.ndarray   # [3, H, W] in [0, 1]
    image2: np.ndarray   # [3, H, W]
    flow: np.ndarray     # [2, H, W] full-resolution pixels, channel 0 horizontal
    valid: np.ndarray    # [H, W] bool


def bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image [C, H, W]`` at float coordinates, clamping at the border."""
    coords = np.stack([y, x])
    return np.stack([map_coordinates(ch, coords, order=1, mode="nearest") for ch in image])


def random_texture(h: int, w: int, rng: np.random.Generator, n_waves: int = 6) -> np.ndarray:
    """Sum of random sinusoids plus blurred noise at two scales, rescaled to [0, 1].

    Wavelengths and blur radii are kept large enough that bilinear resampling of a
    warped copy stays within about 1e-2 of the original.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(n_waves):
            wavelength = rng.uniform(12.0, 40.0)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi / wavelength
            acc += rng.uniform(0.3, 1.0) * np.sin(k * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
        acc /= n_waves
        for sigma, amp in ((3.0, 0.6), (6.0, 1.2)):
            noise = gaussian_filter(rng.standard_normal((h, w)), sigma)
            acc += amp * noise / (noise.std() + 1e-12) * 0.3
        img[c] = acc
    img -= img.min()
    img /= img.max() + 1e-12
    return img


def make_flow(h: int, w: int, rng: np.random.Generator, kind: str, max_magnitude: float = 8.0,
              translation=None) -> np.ndarray:
    """Ground-truth flow ``[2, h, w]``; affine and smooth fields peak at exactly ``max_magnitude``."""
    if kind not in MOTION_KINDS:
        raise ConfigError(f"motion kind must be one of {MOTION_KINDS}, got {kind!r}")
    if kind == "constant":
        if translation is None:
            ang = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0.3, 1.0) * max_magnitude
            translation = (mag * np.cos(ang), mag * np.sin(ang))
        u, v = translation
        return np.stack([np.full((h, w), float(u)), np.full((h, w), float(v))])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "affine":
        a = rng.uniform(-0.05, 0.05, size=(2, 2))
        t = rng.uniform(-1, 1, size=2)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        f = np.stack([a[0, 0] * (xs - cx) + a[0, 1] * (ys - cy) + t[0],
                      a[1, 0] * (xs - cx) + a[1, 1] * (ys - cy) + t[1]])
    else:
        sigma = max(h, w) / 6.0
        f = np.stack([gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap") for _ in range(2)])
    peak = np.sqrt((f ** 2).sum(axis=0)).max()
    return f * (max_magnitude / peak) if peak > 0 else f


def invert_flow(flow: np.ndarray, n_iter: int = 20) -> np.ndarray:
    """Flow ``g`` on the target grid with ``y - g(y) = x`` where ``y = x + flow(x)``."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    g = flow.copy()
    for _ in range(n_iter):
        g = bilinear(flow, xs - g[0], ys - g[1])
    return g


def synth_pair(h: int, w: int, rng: np.random.Generator, motion_kind: str = "smooth",
               max_magnitude: float = 8.0, noise: float = 0.0, translation=None) -> SyntheticSample:
    """``image2`` is ``image1`` moved by ``flow``: ``image2(x + flow(x)) ~= image1(x)``."""
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise ConfigError(f"synthetic size {h}x{w} must be a positive multiple of 8")
    margin = int(np.ceil(max_magnitude)) + 2
    big = random_texture(h + 2 * margin, w + 2 * margin, rng)
    flow = make_flow(h, w, rng, motion_kind, max_magnitude, translation)
    image1 = big[:, margin:margin + h, margin:margin + w].copy()
    if not np.any(flow):
        image2 = image1.copy()
    else:
        inv = invert_flow(flow) if motion_kind != "constant" else flow
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        image2 = bilinear(big, xs - inv[0] + margin, ys - inv[1] + margin)
    if noise > 0:
        image2 = np.clip(image2 + rng.normal(0, noise, size=image2.shape), 0.0, 1.0)
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + flow[0], ys + flow[1]
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    return SyntheticSample(image1.astype(np.float32), image2.astype(np.float32),
                           flow.astype(np.float32), valid)


def synth_dataset(n: int, h: int, w: int, seed: int, motion_kind: str = "smooth",
                  max_magnitude: float = 8.0) -> list:
    """``n`` samples, sample ``i`` drawn from its own stream so the set is order-independent."""
    return [synth_pair(h, w, np.random.default_rng([seed, i]), motion_kind, max_magnitude) for i in range(n)]
