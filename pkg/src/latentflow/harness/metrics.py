"""End-point error and outlier-rate metrics."""
from __future__ import annotations

from typing import Optional

import numpy as np

from latentflow.errors import UndefinedMetricError
from latentflow.ndtensor import Tensor


def _arrays(pred, gt, valid):
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = np.ones(gt.shape[1:], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise UndefinedMetricError("no valid pixels")
    return pred, gt, valid


def endpoint_error(pred, gt) -> np.ndarray:
    return np.sqrt(((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2).sum(axis=0))


def aepe(pred, gt, valid: Optional[np.ndarray] = None) -> float:
    """Mean L2 distance over valid pixels; flows are ``[2, H, W]``."""
    pred, gt, valid = _arrays(pred, gt, valid)
    return float(endpoint_error(pred, gt)[valid].mean())


def f1_all(pred, gt, valid: Optional[np.ndarray] = None, combine_mode: str = "or") -> float:
    """Percentage of valid pixels with error > 3 px or > 5% of |gt| (``combine_mode="and"``: both)."""
    pred, gt, valid = _arrays(pred, gt, valid)
    err = endpoint_error(pred, gt)
    mag = np.sqrt((gt ** 2).sum(axis=0))
    abs_bad, rel_bad = err > 3.0, err > 0.05 * mag
    if combine_mode == "or":
        bad = abs_bad | rel_bad
    elif combine_mode == "and":
        bad = abs_bad & rel_bad
    else:
        raise ValueError(f"combine_mode must be 'or' or 'and', got {combine_mode!r}")
    return float(100.0 * bad[valid].sum() / valid.sum())
