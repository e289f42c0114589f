"""Training losses (smooth L1, perceptual, weighted total) and PSNR / SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import graph as G
from .graph import Tensor
from .haze import luma

DEFAULT_LAMBDA = 0.04
PSNR_CAP = 100.0


def _check_pair(pred: Tensor, gt: Tensor, op: str) -> None:
    if pred.shape != gt.shape:
        raise G.ShapeError(f"{op}: prediction {pred.shape} and target {gt.shape} differ")
    if pred.data.ndim != 4:
        raise G.ShapeError(f"{op}: expected (n, c, h, w) tensors, got {pred.shape}")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def smooth_l1(pred, gt) -> Tensor:
    """Per-image sum over channels of F_S(error), averaged over pixels, then over the batch."""
    pred, gt = _tensor(pred), _tensor(gt)
    _check_pair(pred, gt, "smooth_l1")
    per_elem = G.smooth_l1_elementwise(G.sub(pred, gt))
    # mean over (n, c, h, w) times c == batch mean of (1/N) sum_x sum_i
    return G.scale(G.mean_all(per_elem), pred.shape[1])


@dataclass
class FeatureNet:
    """Frozen three-stage conv pyramid standing in for a pretrained feature extractor.

    Stage ``j`` is two 3x3 conv + ReLU layers; stages 2 and 3 enter with a
    stride-2 conv, so features are taken at full, half and quarter resolution
    with 16, 32 and 64 channels.
    """

    weights: list[tuple[Tensor, Tensor, int]]
    taps: tuple[int, ...]

    @classmethod
    def create(cls, seed: int = 1234, channels=(16, 32, 64), dtype=np.float32) -> "FeatureNet":
        rng = np.random.default_rng(seed)
        layers = []
        taps = []
        c_in = 3
        for stage, c in enumerate(channels):
            for k in range(2):
                stride = 2 if (stage > 0 and k == 0) else 1
                fan_in = c_in * 9
                # He-uniform keeps responses O(1) through the frozen ReLU stack
                bound = math.sqrt(6.0 / fan_in)
                w = Tensor(rng.uniform(-bound, bound, (c, c_in, 3, 3)).astype(dtype))
                b = Tensor(np.zeros(c, dtype=dtype))
                layers.append((w, b, stride))
                c_in = c
            taps.append(len(layers) - 1)
        return cls(layers, tuple(taps))

    def astype(self, dtype) -> "FeatureNet":
        return FeatureNet([(w.astype(dtype), b.astype(dtype), s) for w, b, s in self.weights], self.taps)

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise G.ShapeError(f"feature net needs at least 4x4 inputs for three stages, got {x.shape[2:]}")
        feats = []
        for idx, (w, b, stride) in enumerate(self.weights):
            x = G.relu(G.conv2d(x, w, b, stride=stride, padding=1))
            if idx in self.taps:
                feats.append(x)
        return feats


def perceptual(pred, gt, featnet: FeatureNet) -> Tensor:
    """Sum over stages of ||phi_j(pred) - phi_j(gt)||^2 / (C_j H_j W_j), batch-averaged."""
    pred, gt = _tensor(pred), _tensor(gt)
    _check_pair(pred, gt, "perceptual")
    if featnet.weights[0][0].data.dtype != pred.data.dtype:
        featnet = featnet.astype(pred.data.dtype)
    with G.no_grad():
        target = featnet(gt.detach())
    total = None
    for fp, ft in zip(featnet(pred), target):
        term = G.mean_all(G.square(G.sub(fp, ft)))
        total = term if total is None else G.add(total, term)
    return total


def total_loss(pred, gt, lam: float = DEFAULT_LAMBDA, featnet: FeatureNet | None = None,
               parts: bool = False):
    """L_S + lam * L_P. With ``parts`` also return the (L_S, L_P) floats.

    With ``lam == 0`` the perceptual term is skipped and the result is
    exactly the smooth L1 tensor.
    """
    if not (lam >= 0 and math.isfinite(lam)):
        raise ValueError(f"lambda must be finite and non-negative, got {lam}")
    ls = smooth_l1(pred, gt)
    if lam == 0:
        lp_value = 0.0
        if parts and featnet is not None:
            with G.no_grad():
                lp_value = perceptual(_tensor(pred).detach(), gt, featnet).item()
        return (ls, ls.item(), lp_value) if parts else ls
    if featnet is None:
        raise ValueError("a FeatureNet is required when lambda > 0")
    lp = perceptual(pred, gt, featnet)
    loss = G.add(ls, G.scale(lp, lam))
    return (loss, ls.item(), lp.item()) if parts else loss


# --- metrics --------------------------------------------------------------------------

def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 100 dB for identical inputs."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise G.ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _to_gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise G.ShapeError("ssim compares single images; got a batch")
        x = x[0]
    if x.ndim == 3:
        if x.shape[0] == 3:
            return luma(x[None])[0, 0]
        if x.shape[0] == 1:
            return x[0]
        raise G.ShapeError(f"ssim: expected 1 or 3 channels, got {x.shape[0]}")
    if x.ndim == 2:
        return x
    raise G.ShapeError(f"ssim: unsupported shape {x.shape}")


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid Gaussian windows of the luma images."""
    ga, gb = _to_gray(_np(a)), _to_gray(_np(b))
    if ga.shape != gb.shape:
        raise G.ShapeError(f"ssim: shapes {ga.shape} and {gb.shape} differ")
    if min(ga.shape) < window:
        raise G.ShapeError(f"ssim: image {ga.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(ga, g)
    mu_b = _filter_valid(gb, g)
    var_a = _filter_valid(ga * ga, g) - mu_a * mu_a
    var_b = _filter_valid(gb * gb, g) - mu_b * mu_b
    cov = _filter_valid(ga * gb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
