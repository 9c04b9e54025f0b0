"""Supervision over all recurrent iterates."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from latentflow.ndtensor import Tensor, abs as tabs, as_tensor


def sequence_weights(n: int, gamma: float = 0.8) -> np.ndarray:
    return gamma ** (n - 1 - np.arange(n, dtype=np.float64))


def sequence_loss(predictions: Sequence[Tensor], gt, valid: Optional[np.ndarray] = None,
                  gamma: float = 0.8) -> Tensor:
    """``sum_i gamma^(N-1-i) * mean_valid |pred_i - gt|_1``."""
    if not predictions:
        raise ValueError("sequence_loss needs at least one prediction")
    dtype = predictions[0].dtype
    gt = as_tensor(np.asarray(gt.data if isinstance(gt, Tensor) else gt), dtype)
    h, w = gt.shape[1:]
    valid = np.ones((h, w), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("sequence_loss: no valid pixels")
    weight_map = (valid / count).astype(dtype)
    total = None
    for wgt, pred in zip(sequence_weights(len(predictions), gamma), predictions):
        per_pixel = tabs(pred - gt).sum(axis=0)
        term = (per_pixel * weight_map).sum() * float(wgt)
        total = term if total is None else total + term
    return total
