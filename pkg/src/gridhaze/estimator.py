"""scikit-learn style wrappers around the dehazing network and the derived-input stack."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .haze import ScenePair, derived_inputs
from .graph import Tensor
from .losses import psnr
from .network import GridConfig, apply_ablation, build, reduced_config
from .trainer import TrainConfig, fit, predict_image


def check_image_batch(X, name: str = "X", channels: int = 3) -> np.ndarray:
    """Validate an (n, c, h, w) batch of images with values in [0, 1]; returns float32."""
    arr = np.asarray(X.data if isinstance(X, Tensor) else X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be (n, {channels}, h, w), got shape {arr.shape}")
    if arr.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels on axis 1, got {arr.shape[1]}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got {arr.dtype}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]; got range [{arr.min():.3g}, {arr.max():.3g}]")
    return arr


def check_image_pairs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_image_batch(X, "X")
    y = check_image_batch(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X {X.shape} and y {y.shape} must have identical shapes")
    return X, y


class GridDehazer(RegressorMixin, BaseEstimator):
    """Image-to-image regressor: hazy batch ``X`` to clear batch ``y``.

    ``score`` is the mean PSNR in dB rather than R^2.
    """

    def __init__(self, preset: str = "reduced", rows: int | None = None, cols: int | None = None,
                 variant: str = "full", patch_size: int = 64, batch_size: int = 4, lr: float = 1e-3,
                 halve_every: int = 20, epochs: int = 1, max_steps: int | None = None,
                 lam: float = 0.04, random_state: int = 0):
        self.preset = preset
        self.rows = rows
        self.cols = cols
        self.variant = variant
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.lr = lr
        self.halve_every = halve_every
        self.epochs = epochs
        self.max_steps = max_steps
        self.lam = lam
        self.random_state = random_state

    def _grid_config(self) -> GridConfig:
        if self.preset not in ("reduced", "default"):
            raise ValueError(f"preset must be 'reduced' or 'default', got {self.preset!r}")
        cfg = reduced_config() if self.preset == "reduced" else GridConfig()
        if self.rows is not None or self.cols is not None:
            rows = self.rows or cfg.rows
            cfg = replace(cfg, rows=rows, cols=self.cols or cfg.cols, rdb_per_row=None,
                          channels_per_scale=tuple(cfg.channels_per_scale[0] * 2**i for i in range(rows)))
        return apply_ablation(cfg, self.variant)

    def fit(self, X, y):
        X, y = check_image_pairs(X, y)
        cfg = self._grid_config()
        tc = TrainConfig(patch_size=self.patch_size, batch_size=self.batch_size, lr0=self.lr,
                         halve_every=self.halve_every, epochs=self.epochs, max_steps=self.max_steps,
                         seed=self.random_state, lam=self.lam)
        pairs = [ScenePair(Tensor(y[i : i + 1]), Tensor(X[i : i + 1]), None, None) for i in range(len(X))]
        self.params_, self.train_log_ = fit(build(cfg, self.random_state), pairs, tc)
        self.config_ = cfg
        self.n_images_seen_ = len(X)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_image_batch(X)
        return np.concatenate([predict_image(self.params_, X[i : i + 1]) for i in range(len(X))])

    def score(self, X, y, sample_weight=None) -> float:
        X, y = check_image_pairs(X, y)
        pred = self.predict(X)
        scores = np.array([psnr(pred[i], y[i]) for i in range(len(X))])
        return float(np.average(scores, weights=sample_weight))


class DerivedInputs(TransformerMixin, BaseEstimator):
    """Stateless transformer from RGB batches to the 16-channel hand-crafted input stack."""

    def __init__(self, gamma: float = 0.7):
        self.gamma = gamma

    def fit(self, X, y=None):
        check_image_batch(X)
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        self.n_output_channels_ = 16
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_output_channels_")
        X = check_image_batch(X)
        return np.concatenate([derived_inputs(X[i : i + 1], self.gamma).data for i in range(len(X))])
