"""Bias-corrected Adam over a named parameter registry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """A loss or gradient contained NaN or Inf."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """Apply one Adam update in place.

    Gradients default to each parameter's ``.grad``; a missing gradient counts
    as zero. Every gradient is checked before anything is modified, so a
    non-finite gradient leaves parameters and state untouched.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        dt = p.data.dtype
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(dt, copy=False)
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        m_hat = m / dt.type(bc1)
        v_hat = v / dt.type(bc2)
        p.data = p.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))
