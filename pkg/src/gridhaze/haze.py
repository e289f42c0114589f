"""Atmosphere scattering: transmission, haze synthesis and inversion, derived inputs.

Images live in [0, 1]; the atmospheric light ``A`` is one scalar shared by the
three color channels. Synthetic depth maps and procedural clear scenes stand in
for captured datasets.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .graph import ShapeError, Tensor
from .pnm import read_depth, read_image, write_depth, write_image

DEFAULT_T_FLOOR = 0.05
LUMA = (0.299, 0.587, 0.114)
DEPTH_KINDS = ("ramp", "radial", "fractal")

INDOOR_BETA = (0.6, 1.8)
INDOOR_AIRLIGHT = (0.7, 1.0)
OUTDOOR_BETA = (0.04, 0.2)
OUTDOOR_AIRLIGHT = (0.8, 1.0)


@dataclass(frozen=True)
class HazeParams:
    beta: float
    A: float

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if not 0 < self.A <= 1:
            raise ValueError(f"atmospheric light must lie in (0, 1], got {self.A}")


@dataclass
class ScenePair:
    clear: Tensor
    hazy: Tensor
    params: HazeParams
    depth: np.ndarray


def _array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _check_depth(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"depth map must be (h, w), got {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("depth values must be finite and non-negative")
    return d


def transmission(depth, beta: float) -> Tensor:
    """t = exp(-beta * d) as a (1, 1, h, w) tensor."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = _check_depth(depth)
    t = np.exp(-beta * d)
    return Tensor(t[None, None].astype(np.float32))


def _check_t(t: np.ndarray, image: np.ndarray, op: str) -> None:
    if t.ndim != 4 or t.shape[1] != 1 or t.shape[2:] != image.shape[2:] or t.shape[0] not in (1, image.shape[0]):
        raise ShapeError(f"{op}: transmission shape {t.shape} incompatible with image {image.shape}")


def apply_haze(clear, t, A: float) -> Tensor:
    """I = J * t + A * (1 - t) per channel."""
    J = _array(clear)
    tt = _array(t).astype(J.dtype, copy=False)
    if J.ndim != 4:
        raise ShapeError(f"apply_haze: image must be (n, c, h, w), got {J.shape}")
    _check_t(tt, J, "apply_haze")
    a = J.dtype.type(A)
    out = J * tt + a * (1 - tt)
    return Tensor(np.clip(out, 0, 1).astype(J.dtype))


def invert_haze(hazy, t, A: float, t_floor: float = DEFAULT_T_FLOOR) -> Tensor:
    """J = (I - A * (1 - t')) / t' with t' = max(t, t_floor), clamped to [0, 1]."""
    if not t_floor > 0:
        raise ValueError(f"t_floor must be positive, got {t_floor}")
    I = _array(hazy)
    tt = _array(t).astype(I.dtype, copy=False)
    if I.ndim != 4:
        raise ShapeError(f"invert_haze: image must be (n, c, h, w), got {I.shape}")
    _check_t(tt, I, "invert_haze")
    tp = np.maximum(tt, I.dtype.type(t_floor))
    a = np.asarray(A, dtype=I.dtype)
    out = (I - a * (1 - tp)) / tp
    return Tensor(np.clip(out, 0, 1).astype(I.dtype))


def _normalize(d: np.ndarray) -> np.ndarray:
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def synthetic_depth(h: int, w: int, kind: str = "fractal", seed: int = 0) -> np.ndarray:
    """Deterministic (h, w) depth map scaled to [0, 1].

    ``ramp`` grows linearly left to right, ``radial`` grows with distance from
    a seeded vanishing point, ``fractal`` sums octaves of smoothed noise.
    """
    if h < 8 or w < 8:
        raise ValueError(f"depth maps need h, w >= 8, got {h}x{w}")
    if kind not in DEPTH_KINDS:
        raise ValueError(f"unknown depth kind {kind!r}; choose from {DEPTH_KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "ramp":
        return np.broadcast_to(np.linspace(0.0, 1.0, w), (h, w)).copy()
    if kind == "radial":
        cy = rng.uniform(0.25, 0.75) * (h - 1)
        cx = rng.uniform(0.25, 0.75) * (w - 1)
        yy, xx = np.mgrid[0:h, 0:w]
        return _normalize(np.hypot(yy - cy, xx - cx))
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h - 1, w - 1])[:, None, None]
    d = np.zeros((h, w))
    amp = 1.0
    for octave in range(5):
        cells = 2 ** (octave + 1)
        coarse = rng.standard_normal((cells + 1, cells + 1))
        d += amp * ndimage.map_coordinates(coarse, [yy * cells, xx * cells], order=1)
        amp *= 0.5
    return _normalize(d)


def synthetic_scene(h: int, w: int, seed: int = 0) -> Tensor:
    """Procedural clear image: a shaded backdrop with soft colored blobs and mild texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    img = np.empty((3, h, w))
    for c in range(3):
        gy, gx = rng.uniform(-0.4, 0.4, size=2)
        img[c] = rng.uniform(0.3, 0.7) + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        color = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mask = ndimage.gaussian_filter(mask.astype(float), sigma=1.0)
        img = img * (1 - mask) + color[:, None, None] * mask
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.5)
    img = img + 0.03 * texture / (texture.std() + 1e-12)
    return Tensor(np.clip(img, 0, 1)[None].astype(np.float32))


def luma(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of (n, 3, h, w) -> (n, 1, h, w)."""
    r, g, b = LUMA
    return r * image[:, 0:1] + g * image[:, 1:2] + b * image[:, 2:3]


def white_balance(image: np.ndarray) -> np.ndarray:
    # gray-world: gain = mean luma / channel mean, clamped to [0.5, 2]
    target = luma(image).mean(axis=(1, 2, 3), keepdims=True)
    means = image.mean(axis=(2, 3), keepdims=True)
    gains = np.clip(target / np.maximum(means, 1e-6), 0.5, 2.0)
    return np.clip(image * gains, 0, 1)


def contrast_enhance(image: np.ndarray, clip_percent: float = 1.0) -> np.ndarray:
    out = np.empty_like(image)
    for i, im in enumerate(image):
        lo, hi = np.percentile(im, [clip_percent, 100 - clip_percent])
        out[i] = im if hi - lo < 1e-6 else np.clip((im - lo) / (hi - lo), 0, 1)
    return out


def gamma_correct(image: np.ndarray, gamma: float = 0.7) -> np.ndarray:
    return np.power(np.clip(image, 0, 1), gamma)


def derived_inputs(image, gamma: float = 0.7) -> Tensor:
    """Stack hand-crafted variants into 16 channels.

    Order: original (3), white balanced (3), contrast enhanced (3), gamma
    corrected (3), gamma corrected twice (3), luma (1).
    """
    x = _array(image)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"derived_inputs needs (n, 3, h, w), got {x.shape}")
    gc = gamma_correct(x, gamma)
    parts = [x, white_balance(x), contrast_enhance(x), gc, gamma_correct(gc, gamma), luma(x)]
    return Tensor(np.concatenate(parts, axis=1).astype(x.dtype))


# --- dataset generation ---------------------------------------------------------------

MANIFEST_HEADER = "#gridhaze-manifest v1"
IMAGE_SUFFIXES = (".ppm", ".pnm")


def fmt6(x: float) -> str:
    return f"{x:.6g}"


@dataclass(frozen=True)
class ManifestRecord:
    clear_path: Path
    depth_path: Path
    beta: float
    A: float
    hazy_path: Path


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    def to_text(self, base: Path) -> str:
        lines = [MANIFEST_HEADER]
        for r in self.records:
            rel = [Path(_relpath(p, base)).as_posix() for p in (r.clear_path, r.depth_path)]
            lines.append("\t".join([rel[0], rel[1], fmt6(r.beta), fmt6(r.A),
                                    Path(_relpath(r.hazy_path, base)).as_posix()]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_text(path.parent), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ValueError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            clear, depth, beta, A, hazy = fields
            records.append(ManifestRecord(base / clear, base / depth, float(beta), float(A), base / hazy))
        return cls(records)


def _relpath(p: Path, base: Path) -> str:
    return os.path.relpath(Path(p).resolve(), Path(base).resolve())


def list_clear_images(clear_dir) -> list[Path]:
    clear_dir = Path(clear_dir)
    if not clear_dir.is_dir():
        raise FileNotFoundError(f"clear image directory {clear_dir} does not exist")
    files = sorted(p for p in clear_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .ppm images in {clear_dir}")
    return files


def synth_dataset(clear_dir, out_dir, count: int, beta_range=INDOOR_BETA, A_range=INDOOR_AIRLIGHT,
                  depth_kind: str = "fractal", seed: int = 0) -> DatasetManifest:
    """Haze ``count`` images drawn cyclically from ``clear_dir`` into ``out_dir``.

    Sample ``i`` uses its own generator seeded by ``(seed, i)``, so records do
    not depend on generation order. ``beta`` and ``A`` are rounded to the six
    significant digits the manifest stores, and haze is computed from the
    8-bit depth actually written, so the manifest reproduces each pair.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    b_lo, b_hi = beta_range
    a_lo, a_hi = A_range
    if not (0 < b_lo <= b_hi):
        raise ValueError(f"invalid beta range {beta_range}")
    if not (0 < a_lo <= a_hi <= 1):
        raise ValueError(f"invalid atmospheric light range {A_range}")
    clear_files = list_clear_images(clear_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        beta = float(fmt6(rng.uniform(b_lo, b_hi)))
        A = float(fmt6(rng.uniform(a_lo, a_hi)))
        depth_seed = int(rng.integers(2**31))
        clear_path = clear_files[i % len(clear_files)]
        clear = read_image(clear_path)
        h, w = clear.shape[2:]
        depth_path = out_dir / f"depth_{i:05d}.pgm"
        hazy_path = out_dir / f"hazy_{i:05d}.ppm"
        write_depth(synthetic_depth(h, w, depth_kind, depth_seed), depth_path)
        depth = read_depth(depth_path)
        write_image(apply_haze(clear, transmission(depth, beta), A), hazy_path)
        records.append(ManifestRecord(clear_path, depth_path, beta, A, hazy_path))

    manifest = DatasetManifest(records)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def load_pairs(manifest) -> list[ScenePair]:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    pairs = []
    for r in manifest.records:
        pairs.append(ScenePair(read_image(r.clear_path), read_image(r.hazy_path),
                               HazeParams(r.beta, r.A), read_depth(r.depth_path)))
    return pairs


def make_pair(clear, depth, params: HazeParams) -> ScenePair:
    """Build an in-memory pair whose hazy image follows the scattering model exactly."""
    clear_t = clear if isinstance(clear, Tensor) else Tensor(clear)
    depth = _check_depth(depth)
    hazy = apply_haze(clear_t, transmission(depth, params.beta), params.A)
    return ScenePair(clear_t, hazy, params, depth)


def random_pairs(count: int, size: int = 64, beta_range=INDOOR_BETA, A_range=INDOOR_AIRLIGHT,
                 depth_kind: str = "fractal", seed: int = 0) -> list[ScenePair]:
    """In-memory counterpart of :func:`synth_dataset` on procedural clear scenes."""
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        beta = float(fmt6(rng.uniform(*beta_range)))
        A = float(fmt6(rng.uniform(*A_range)))
        clear = synthetic_scene(size, size, seed=int(rng.integers(2**31)))
        depth = synthetic_depth(size, size, depth_kind, seed=int(rng.integers(2**31)))
        pairs.append(make_pair(clear, depth, HazeParams(beta, A)))
    return pairs
