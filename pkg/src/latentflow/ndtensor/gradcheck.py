"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from latentflow.ndtensor.tensor import Tensor, backward, no_grad, record_branches, reset_tape


NOISE_FACTOR = 1e5


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: tuple = ()
    errors: list = field(default_factory=list)
    skipped: int = 0   # entries whose +-h interval straddles a kink

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4,
                    n_points: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-8) -> GradcheckResult:
    """Compare ``backward`` against central differences.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``tensors``. When ``n_points`` is given, that many (tensor, entry) pairs
    are sampled uniformly over all entries; otherwise every entry is checked.

    Central differences are only meaningful where the function is smooth on
    ``[x - h, x + h]``. Each piecewise op records its branch pattern; when
    the patterns at ``x + h`` and ``x - h`` differ, the entry is counted in
    ``skipped`` and (when sampling) replaced by a fresh draw.

    The relative-error denominator is floored at ``floor`` or at
    ``NOISE_FACTOR`` times the cancellation noise ``eps * |f| / h`` of the
    difference quotient, whichever is larger. At a tolerance of 1e-4 this
    accepts absolute errors up to ten times that noise on gradients too
    small for the quotient to resolve; everywhere else the test is relative.
    """
    rng = rng or np.random.default_rng(0)
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    reset_tape()
    loss = fn()
    backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    sizes = np.array([t.size for t in tensors])
    total = int(sizes.sum())
    offsets = np.cumsum(sizes) - sizes

    def locate(f):
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        return i, int(f - offsets[i])

    if n_points is None:
        order = np.arange(total)
        want = total
    else:
        order = rng.permutation(total)
        want = min(n_points, total)

    errors = []
    skipped = 0
    worst, worst_err = (), -1.0
    with no_grad():
        for f in order:
            if len(errors) >= want:
                break
            i, j = locate(int(f))
            view = tensors[i].data.reshape(-1)
            orig = view[j]
            view[j] = orig + h
            with record_branches() as plus:
                fp = fn().item()
            view[j] = orig - h
            with record_branches() as minus:
                fm = fn().item()
            view[j] = orig
            if plus != minus:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            analytic = float(grads[i].reshape(-1)[j])
            resolution = NOISE_FACTOR * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / h
            err = relative_error(analytic, numeric, max(floor, resolution))
            errors.append(err)
            if err > worst_err:
                worst_err, worst = err, (i, j, analytic, numeric)
    for t, flag in zip(tensors, flags):
        t.grad = None
        t.requires_grad = flag
    return GradcheckResult(max_rel_error=max(errors) if errors else 0.0, worst=worst,
                           errors=errors, skipped=skipped)
