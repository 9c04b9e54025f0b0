"""Tensor and Tape: the recording half of the reverse-mode autodiff engine.

Every differentiable op appends one node (parents + backward closure) to the
active tape. Nodes are appended in creation order, which is a topological
order by construction, so ``backward`` is a single reverse sweep.
"""
from __future__ import annotations

import contextlib
import hashlib
import os
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from latentflow.errors import ContractError

_DEFAULT_DTYPE = np.dtype(np.float32)
_DEBUG = os.environ.get("LATENTFLOW_DEBUG", "0") not in ("", "0", "false", "False")
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float precision (e.g. float64 for gradchecks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def debug_enabled() -> bool:
    return _DEBUG


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


def note_branch(selector: np.ndarray) -> None:
    """Record which branch a piecewise op took (relu/abs signs, bilinear cells).

    Only active inside ``record_branches``; the finite-difference oracle uses
    it to tell whether a perturbation crossed a non-differentiable point.
    """
    log = getattr(_local, "branches", None)
    if log is not None:
        sel = np.ascontiguousarray(selector)
        log.append(hashlib.blake2b(sel.tobytes() + str(sel.shape).encode(), digest_size=16).digest())


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    old = getattr(_local, "branches", None)
    _local.branches = []
    try:
        yield _local.branches
    finally:
        _local.branches = old


class Node:
    __slots__ = ("tape", "index", "parents", "backward_fn")

    def __init__(self, tape: "Tape", index: int, parents: tuple, backward_fn: Callable):
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Can be used as a context manager to make it the active tape for the
    current thread; otherwise a fresh tape is created on demand after the
    previous one was consumed by ``backward``.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._saved: Optional[Tape] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, parents: tuple, backward_fn: Callable) -> Node:
        if self.consumed:
            raise ContractError("cannot record onto a consumed tape")
        node = Node(self, len(self.nodes), parents, backward_fn)
        self.nodes.append(node)
        return node

    def __enter__(self) -> "Tape":
        self._saved = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._saved
        self._saved = None


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop the active tape (e.g. after a forward pass that will not be differentiated)."""
    _local.tape = None


class Tensor:
    """Dense n-d array that can participate in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating) or arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor._wrap(arr.astype(dtype, copy=False))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's output and record it on the tape when any parent needs grads."""
    out = Tensor._wrap(data)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced (shape {data.shape})")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = current_tape().record(tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss.

    Accumulates into ``.grad`` of every leaf tensor that requires grad and
    returns the mapping ``{leaf: gradient}`` for this call. The tape is
    consumed: a second call for the same forward pass raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_grads: dict = {}
    if loss._node is None:
        if loss.requires_grad:
            leaf_grads[loss] = np.ones_like(loss.data)
            _accumulate_leaves(leaf_grads)
        return leaf_grads
    tape = loss._node.tape
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward call")
    grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
    nodes = tape.nodes
    for idx in range(loss._node.index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None and parent._node.tape is tape:
                j = parent._node.index
                if j in grads:
                    grads[j] = grads[j] + pg
                else:
                    grads[j] = pg
            else:
                if parent in leaf_grads:
                    leaf_grads[parent] = leaf_grads[parent] + pg
                else:
                    leaf_grads[parent] = pg
    tape.consumed = True
    tape.nodes = []
    _accumulate_leaves(leaf_grads)
    return leaf_grads


def _accumulate_leaves(leaf_grads: dict) -> None:
    for leaf, g in leaf_grads.items():
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
        leaf_grads[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
