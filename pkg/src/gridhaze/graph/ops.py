"""Differentiable primitives over :class:`Tensor`.

Convolutions use an im2col layout: the padded input is viewed as sliding
``k x k`` windows, flattened to a ``(c*k*k, n*oh*ow)`` matrix and multiplied
by the reshaped kernel. The adjoint scatters columns back with one strided add
per kernel offset, which keeps reduction order fixed and results deterministic.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_output

_kinks = threading.local()


@contextmanager
def record_kinks():
    """Collect the branch masks of piecewise ops (ReLU, transmission floor).

    Finite-difference probes compare these patterns to detect a step that
    crossed a non-differentiable point.
    """
    prev = getattr(_kinks, "log", None)
    _kinks.log = log = []
    try:
        yield log
    finally:
        _kinks.log = prev


def _note_kink(mask: np.ndarray) -> None:
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(mask)

__all__ = [
    "conv2d",
    "transposed_conv2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_channels",
    "slice_channels",
    "scale_channel",
    "mean_all",
    "mean_spatial",
    "smooth_l1_elementwise",
    "square",
    "invert_scattering",
    "conv_output_size",
]


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (n, c, h, w) tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(n, c, hp, wp) padded input -> (c*k*k, n*oh*ow) column matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, k, k) -> (c, k, k, n, oh, ow); ow stays innermost for contiguous copies
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * oh * ow)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a padded image."""
    n, c, hp, wp = padded_shape
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_cn(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (c, n*h*w)."""
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _from_cn(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(c, n*h*w) -> contiguous (n, c, h, w)."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    return x[:, :, p : p + h, p : p + w]


def _check_kernel(weight: Tensor, bias: Tensor | None, out_axis: int, op: str) -> None:
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{op}: weight must be (a, b, k, k), got {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ShapeError(
            f"{op}: bias shape {bias.shape} does not match {weight.shape[out_axis]} output channels"
        )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (n, c_in, h, w) with ``weight`` (c_out, c_in, k, k)."""
    _require_4d(x, "conv2d")
    _check_kernel(weight, bias, 0, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: {h}x{w} input with k={k}, stride={stride}, padding={padding} gives empty output"
        )

    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cn(out, n, oh, ow)

    def backward_fn(g):
        g2 = _to_cn(g)
        gx = gw = gb = None
        if x.tracked:
            gx = _crop(_col2im(wmat.T @ g2, xp.shape, k, stride, oh, ow), padding, h, w)
        if weight.tracked:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.tracked:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, "conv2d", inputs, backward_fn)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` taken with the same kernel.

    ``weight`` is (c_in, c_out, k, k): read as a conv2d kernel it maps c_out
    channels to c_in, and this op is the transpose of that linear map. Output
    spatial size is ``(h - 1) * stride - 2 * padding + k + output_padding``.
    """
    _require_4d(x, "transposed_conv2d")
    _check_kernel(weight, bias, 1, "transposed_conv2d")
    if not 0 <= output_padding < stride:
        raise ValueError("transposed_conv2d: output_padding must be in [0, stride)")
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"transposed_conv2d: input has {c} channels but weight expects {c_in}")
    oh = (h - 1) * stride - 2 * padding + k + output_padding
    ow = (w - 1) * stride - 2 * padding + k + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed_conv2d: output would be empty for input {h}x{w}")

    wmat = weight.data.reshape(c_in, -1)
    x2 = _to_cn(x.data)
    padded = (n, c_out, oh + 2 * padding, ow + 2 * padding)
    out = _crop(_col2im(wmat.T @ x2, padded, k, stride, h, w), padding, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        cols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = gw = gb = None
        if x.tracked:
            gx = _from_cn(wmat @ cols, n, h, w)
        if weight.tracked:
            gw = (x2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.tracked:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, "transposed_conv2d", inputs, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return make_output(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_output(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    s_arr = x.data.dtype.type(s)
    return make_output(x.data * s_arr, "scale", (x,), lambda g: (g * s_arr,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return make_output(d * d, "square", (x,), lambda g: (2 * g * d,))


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for x in xs:
        _require_4d(x, "concat_channels")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: (n, h, w) mismatch between {xs[0].shape} and {x.shape}"
            )
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)

    def backward_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_output(out, "concat", xs, backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_output(np.ascontiguousarray(x.data[:, start:stop]), "slice_channels", (x,), backward_fn)


def scale_channel(x: Tensor, weights: Tensor) -> Tensor:
    """Per-channel scaling; ``weights`` is (c,) or (1,) for a shared scalar."""
    _require_4d(x, "scale_channel")
    c = x.shape[1]
    if weights.data.ndim != 1 or weights.shape[0] not in (1, c):
        raise ShapeError(f"scale_channel: weights shape {weights.shape} incompatible with {c} channels")
    wb = weights.data[None, :, None, None]
    xd = x.data

    def backward_fn(g):
        gw = (g * xd).sum(axis=(0, 2, 3))
        if weights.shape[0] == 1:
            gw = gw.sum(keepdims=True)
        return g * wb, gw

    return make_output(xd * wb, "scale_channel", (x, weights), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    """Mean of every element as a ``(1, 1, 1, 1)`` tensor."""
    size = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    inv = x.data.dtype.type(1.0 / size)
    return make_output(out, "mean_all", (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0] * inv, dtype=x.data.dtype),))


def mean_spatial(x: Tensor) -> Tensor:
    """Per-(sample, channel) mean over h, w -> (n, c, 1, 1)."""
    _require_4d(x, "mean_spatial")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.data.dtype)
    inv = x.data.dtype.type(1.0 / hw)
    return make_output(out, "mean_spatial", (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


def smooth_l1_elementwise(e: Tensor) -> Tensor:
    """0.5 e^2 where |e| < 1, |e| - 0.5 elsewhere."""
    d = e.data
    a = np.abs(d)
    inside = a < 1
    out = np.where(inside, 0.5 * d * d, a - 0.5).astype(d.dtype)
    slope = np.where(inside, d, np.sign(d)).astype(d.dtype)
    return make_output(out, "smooth_l1", (e,), lambda g: (g * slope,))


def invert_scattering(hazy: Tensor, t: Tensor, airlight: Tensor, t_floor: float = 0.05) -> Tensor:
    """Solve the scattering model for the clear image, unclamped.

    ``hazy`` is (n, 3, h, w), ``t`` is (n, 1, h, w) and ``airlight`` is
    (n, 1, 1, 1). The transmission is floored at ``t_floor`` first; gradient
    through the floor is zero where it is active.
    """
    for x, name in ((hazy, "hazy"), (t, "t"), (airlight, "airlight")):
        _require_4d(x, f"invert_scattering[{name}]")
    n, _, h, w = hazy.shape
    if t.shape != (n, 1, h, w):
        raise ShapeError(f"invert_scattering: t shape {t.shape} != {(n, 1, h, w)}")
    if airlight.shape != (n, 1, 1, 1):
        raise ShapeError(f"invert_scattering: airlight shape {airlight.shape} != {(n, 1, 1, 1)}")
    dt = hazy.data.dtype
    active = t.data > t_floor
    _note_kink(active)
    tp = np.where(active, t.data, dt.type(t_floor)).astype(dt)
    A = airlight.data
    out = (hazy.data - A * (1 - tp)) / tp

    def backward_fn(g):
        g_hazy = g / tp
        # dJ/dt' = (A - I) / t'^2 ; dJ/dA = (t' - 1) / t'
        g_t = (g * (A - hazy.data) / (tp * tp)).sum(axis=1, keepdims=True) * active
        g_a = (g * (tp - 1) / tp).sum(axis=(1, 2, 3), keepdims=True)
        return g_hazy, g_t.astype(dt), g_a.astype(dt)

    return make_output(out.astype(dt), "invert_scattering", (hazy, t, airlight), backward_fn)
