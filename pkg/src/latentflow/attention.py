"""Scaled dot-product attention shared by the encoder and decoder blocks."""
from __future__ import annotations

from typing import Optional

import numpy as np

from latentflow.ndtensor import Tensor, matmul, softmax_lastdim, transpose


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, axes).reshape(*lead, n, h * dh)


def key_bias(key_mask: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    """Additive logit bias from a boolean visibility mask (True = attend)."""
    if key_mask is None:
        return None
    return np.where(key_mask, 0.0, -np.inf).astype(dtype)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1,
              key_mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v over the last two dims.

    ``q [..., m, D]``, ``k [..., n, D]``, ``v [..., n, Dv]`` with broadcastable
    leading dims. ``key_mask`` is boolean ``[..., n]``; every row must keep at
    least one key.
    """
    d = q.shape[-1]
    bias = key_bias(key_mask, q.dtype)
    if num_heads == 1:
        logits = matmul(q, swap_last(k)) * (1.0 / np.sqrt(d))
        if bias is not None:
            logits = logits + bias[..., None, :]
        return matmul(softmax_lastdim(logits), v)
    qh, kh, vh = _split_heads(q, num_heads), _split_heads(k, num_heads), _split_heads(v, num_heads)
    logits = matmul(qh, swap_last(kh)) * (1.0 / np.sqrt(d // num_heads))
    if bias is not None:
        logits = logits + bias[..., None, None, :]
    return _merge_heads(matmul(softmax_lastdim(logits), vh))
