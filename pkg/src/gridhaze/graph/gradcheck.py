"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import record_kinks
from .tensor import Tensor, backward, zero_grads


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and self.max_rel_error <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger of the two gradients' max-norms."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class ProbeReport:
    max_rel_error: float
    checked: int
    skipped: int


def _eval(fn):
    with record_kinks() as masks:
        value = fn().item()
    return value, masks


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def probe_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                    max_coords: int | None = None, seed: int = 0, kink_retries: int = 2) -> ProbeReport:
    """Compare backprop against central differences for ``fn`` w.r.t. ``tensors``.

    ``fn`` must rebuild its graph from the tensors' current ``data`` on every
    call and return a scalar. With ``max_coords`` set, each tensor is probed at
    that many randomly chosen coordinates instead of all of them.

    A probe whose two evaluations take different branches of a piecewise op
    (a ReLU or the transmission floor) straddles a point where the function
    has no derivative; the step is shrunk tenfold up to ``kink_retries`` times
    and the coordinate is skipped if it still straddles.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks run in double precision; convert tensors first")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
    zero_grads(tensors)
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        kept, numeric = [], []
        for i in idx:
            orig = flat[i]
            step = eps
            for _ in range(kink_retries + 1):
                flat[i] = orig + step
                plus, m_plus = _eval(fn)
                flat[i] = orig - step
                minus, m_minus = _eval(fn)
                flat[i] = orig
                if _same_branches(m_plus, m_minus):
                    kept.append(i)
                    numeric.append((plus - minus) / (2 * step))
                    break
                step /= 10
            else:
                skipped += 1
        if kept:
            worst = max(worst, relative_error(a.reshape(-1)[kept], np.array(numeric)))
        checked += len(kept)
    zero_grads(tensors)
    return ProbeReport(worst, checked, skipped)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                    max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error over all probed coordinates; see :func:`probe_gradients`."""
    return probe_gradients(fn, tensors, eps, max_coords, seed).max_rel_error
