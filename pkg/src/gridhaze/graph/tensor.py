"""Tensor value type and the reverse-mode tape.

Every op that produces a tracked output records a :class:`TapeNode` carrying a
monotonically increasing sequence number. :func:`backward` collects the nodes
reachable from the loss and replays them in strictly decreasing sequence order,
which is exactly reverse creation order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, frozen features)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's precondition."""


class TapeNode:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = tuple(inputs)
        # maps output grad -> tuple of input grads (None for untracked inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, seq={self.seq})"


class Tensor:
    """Dense array (usually ``(n, c, h, w)``) with an optional gradient buffer.

    ``requires_grad`` marks a leaf as tracked: after :func:`backward` its
    ``grad`` holds the accumulated gradient. Outputs of ops on tracked tensors
    carry a ``node`` linking them into the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision_mode(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, tracked={self.tracked})"


def make_output(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a tape node when any input is tracked."""
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.tracked for t in inputs):
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _reachable(loss: Tensor) -> dict[int, Tensor]:
    """Map tape sequence number -> output tensor for every node under ``loss``."""
    owner: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.seq in owner:
            continue
        owner[node.seq] = t
        stack.extend(node.inputs)
    return owner


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Calling twice without :func:`zero_grads` adds the second contribution on
    top of the first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise RuntimeError("backward called on a tensor with an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owner = _reachable(loss)
    for seq in sorted(owner, reverse=True):
        out = owner[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out.node
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.tracked:
                continue
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
