"""Patch-based training loop, full-image evaluation and the ablation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import graph as G
from .checkpoint import save_checkpoint
from .graph import AdamState, NonFiniteError, Tensor, adam_step
from .haze import DEFAULT_T_FLOOR, ScenePair, fmt6
from .losses import DEFAULT_LAMBDA, FeatureNet, psnr, ssim, total_loss
from .network import GridConfig, ModelParams, apply_ablation, build, dehaze


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite; parameters were left at their last good values."""


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 4
    lr0: float = 1e-3
    halve_every: int = 20
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    lam: float = DEFAULT_LAMBDA
    eval_every: int = 0
    featnet_seed: int = 1234

    def __post_init__(self):
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be positive")
        if self.halve_every <= 0:
            raise ValueError(f"halve_every must be positive, got {self.halve_every}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if not (self.lr0 > 0 and math.isfinite(self.lr0)):
            raise ValueError(f"lr0 must be positive, got {self.lr0}")


def lr_schedule(epoch: int, lr0: float, halve_every: int) -> float:
    if halve_every <= 0:
        raise ValueError(f"halve_every must be positive, got {halve_every}")
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return lr0 * 0.5 ** (epoch // halve_every)


def crop_window(h: int, w: int, patch_size: int, rng: np.random.Generator) -> tuple[int, int]:
    if h < patch_size or w < patch_size:
        raise G.ShapeError(f"image {h}x{w} is smaller than the {patch_size}x{patch_size} patch")
    return int(rng.integers(0, h - patch_size + 1)), int(rng.integers(0, w - patch_size + 1))


def sample_patch(pair: ScenePair, patch_size: int, rng: np.random.Generator,
                 return_window: bool = False):
    """Co-located random crops of the hazy and clear images, as float arrays."""
    h, w = pair.clear.shape[2:]
    top, left = crop_window(h, w, patch_size, rng)
    win = (slice(None), slice(None), slice(top, top + patch_size), slice(left, left + patch_size))
    hazy, clear = pair.hazy.data[win], pair.clear.data[win]
    if return_window:
        return hazy, clear, (top, left)
    return hazy, clear


# --- logging ------------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    ls: float
    lp: float
    loss: float

    def line(self) -> str:
        return "\t".join([str(self.step)] + [fmt6(v) for v in (self.lr, self.ls, self.lp, self.loss)])


@dataclass(frozen=True)
class EvalRecord:
    step: int
    psnr: float
    ssim: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    HEADER = "step\tlr\tLs\tLp\tL"

    def to_text(self) -> str:
        return "\n".join([self.HEADER] + [r.line() for r in self.steps]) + "\n"

    def eval_text(self) -> str:
        lines = ["step\tpsnr\tssim"]
        lines += [f"{e.step}\t{fmt6(e.psnr)}\t{fmt6(e.ssim)}" for e in self.evals]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.steps])


# --- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    psnr: float
    ssim: float
    per_image: list[tuple[float, float]]


def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    h, w = x.shape[2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")


def predict_image(params: ModelParams, hazy, t_floor: float = DEFAULT_T_FLOOR) -> np.ndarray:
    """Full-image inference; reflective padding to the grid multiple, cropped back."""
    x = hazy.data if isinstance(hazy, Tensor) else np.asarray(hazy, dtype=np.float32)
    h, w = x.shape[2:]
    with G.no_grad():
        out = dehaze(Tensor(_pad_to_multiple(x, params.config.multiple)), params, t_floor=t_floor)
    return out.data[:, :, :h, :w]


Model = ModelParams | Callable[[Tensor], object] | None


def evaluate(model: Model, pairs: Sequence[ScenePair], t_floor: float = DEFAULT_T_FLOOR) -> EvalResult:
    """Mean PSNR/SSIM against the clear images.

    ``model`` may be trained parameters, any callable mapping the hazy tensor to
    an image, or ``None`` to score the hazy inputs themselves.
    """
    if not pairs:
        raise ValueError("evaluation set is empty")
    scores = []
    for pair in pairs:
        if model is None:
            out = pair.hazy.data
        elif isinstance(model, ModelParams):
            out = predict_image(model, pair.hazy, t_floor)
        else:
            out = model(pair.hazy)
            out = out.data if isinstance(out, Tensor) else np.asarray(out)
        scores.append((psnr(out, pair.clear), ssim(out, pair.clear)))
    arr = np.array(scores)
    return EvalResult(float(arr[:, 0].mean()), float(arr[:, 1].mean()), scores)


# --- training -----------------------------------------------------------------------------

def _finite_grads(params: ModelParams) -> bool:
    return all(t.grad is None or np.all(np.isfinite(t.grad)) for t in params.tensors.values())


def fit(params: ModelParams, pairs: Sequence[ScenePair], config: TrainConfig,
        eval_pairs: Sequence[ScenePair] | None = None, checkpoint_dir=None,
        optimizer: AdamState | None = None, featnet: FeatureNet | None = None,
        t_floor: float = DEFAULT_T_FLOOR) -> tuple[ModelParams, TrainLog]:
    """Train ``params`` in place with Adam on random patches.

    One epoch is ``ceil(len(pairs) / batch_size)`` steps over a fresh
    permutation. Training stops after ``config.epochs`` epochs or
    ``config.max_steps`` steps, whichever comes first. With ``checkpoint_dir``
    the state is written to ``last.gdhz`` after every epoch and to ``best.gdhz``
    whenever the held-out PSNR improves.
    """
    if not pairs:
        raise ValueError("training set is empty")
    cfg = params.config
    if config.patch_size % cfg.multiple:
        raise G.ShapeError(f"patch size {config.patch_size} must be a multiple of {cfg.multiple}")
    for i, p in enumerate(pairs):
        if p.hazy.shape != p.clear.shape:
            raise G.ShapeError(f"pair {i}: hazy {p.hazy.shape} and clear {p.clear.shape} differ")
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    featnet = featnet or (FeatureNet.create(config.featnet_seed) if config.lam > 0 else None)
    opt = optimizer or AdamState()
    log = TrainLog()
    steps_per_epoch = math.ceil(len(pairs) / config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    best = -math.inf
    step = 0

    def run_eval():
        nonlocal best
        res = evaluate(params, eval_pairs, t_floor)
        log.evals.append(EvalRecord(step, res.psnr, res.ssim))
        if ckpt is not None and res.psnr > best:
            save_checkpoint(params, opt, ckpt / "best.gdhz", step, config.seed)
        best = max(best, res.psnr)

    epoch = 0
    while step < total:
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(pairs))
        lr = lr_schedule(epoch, config.lr0, config.halve_every)
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            crops = [sample_patch(pairs[i], config.patch_size, rng) for i in idx]
            hazy = Tensor(np.concatenate([c[0] for c in crops]))
            clear = Tensor(np.concatenate([c[1] for c in crops]))
            pred = dehaze(hazy, params, clamp=False, t_floor=t_floor)
            loss, ls, lp = total_loss(pred, clear, config.lam, featnet, parts=True)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}")
            params.zero_grads()
            G.backward(loss)
            if not _finite_grads(params):
                raise TrainingDiverged(f"non-finite gradient at step {step + 1}")
            try:
                adam_step(params.tensors, opt, lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc)) from exc
            step += 1
            log.steps.append(StepRecord(step, lr, ls, lp, loss.item()))
            if eval_pairs and config.eval_every and step % config.eval_every == 0:
                run_eval()
        epoch += 1
        if ckpt is not None:
            save_checkpoint(params, opt, ckpt / "last.gdhz", step, config.seed)
    params.zero_grads()
    if eval_pairs and (not log.evals or log.evals[-1].step != step):
        run_eval()
    return params, log


# --- ablations ----------------------------------------------------------------------------

GROUPS = {
    "estimation": ("full", "indirect_head"),
    "inputs": ("full", "derived_inputs", "no_preprocessing"),
    "variants": ("full", "no_attention", "no_exchange", "encoder_decoder", "original_gridnet_style",
                 "no_postprocessing", "no_perceptual"),
}
LABELS = {
    ("estimation", "full"): "direct",
    ("estimation", "indirect_head"): "indirect",
    ("inputs", "full"): "learned inputs",
}


@dataclass(frozen=True)
class AblationRow:
    group: str
    label: str
    rows: int
    cols: int
    n_params: int
    final_loss: float
    psnr: float
    ssim: float

    def cells(self) -> list[str]:
        loss = "-" if math.isnan(self.final_loss) else fmt6(self.final_loss)
        return [self.group, self.label, str(self.rows), str(self.cols), str(self.n_params), loss,
                f"{self.psnr:.2f}", f"{self.ssim:.4f}"]


@dataclass
class AblationReport:
    rows: list[AblationRow]
    logs: dict[tuple[str, str], TrainLog] = field(default_factory=dict)

    COLUMNS = ["group", "label", "rows", "cols", "params", "final_loss", "psnr", "ssim"]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)] + ["\t".join(r.cells()) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        out = []
        for group in dict.fromkeys(r.group for r in self.rows):
            out.append(f"### {group}\n")
            out.append("| " + " | ".join(self.COLUMNS[1:]) + " |")
            out.append("|" + "---|" * (len(self.COLUMNS) - 1))
            for r in self.rows:
                if r.group == group:
                    out.append("| " + " | ".join(r.cells()[1:]) + " |")
            out.append("")
        return "\n".join(out)

    def find(self, group: str, label: str) -> AblationRow:
        for r in self.rows:
            if r.group == group and r.label == label:
                return r
        raise KeyError((group, label))


def _grid_config(base: GridConfig, rows: int, cols: int) -> GridConfig:
    chans = tuple(base.channels_per_scale[0] * 2**i for i in range(rows))
    return replace(base, rows=rows, cols=cols, channels_per_scale=chans, rdb_per_row=None)


def run_ablation_suite(base_config: GridConfig, train_pairs: Sequence[ScenePair],
                       test_pairs: Sequence[ScenePair], variants: Sequence[str] = ("full",),
                       grid_sizes: Sequence[tuple[int, int]] = (),
                       train_config: TrainConfig | None = None, model_seed: int = 0,
                       progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train every variant and grid size under one budget and tabulate test scores.

    All runs share ``model_seed`` and ``train_config``; ``no_perceptual``
    trains with the perceptual weight set to zero.
    """
    train_config = train_config or TrainConfig()
    unknown = [v for v in variants if v not in {v for g in GROUPS.values() for v in g}]
    if unknown:
        raise ValueError(f"unknown ablation variant(s): {', '.join(unknown)}")
    cache: dict[tuple, tuple[TrainLog, EvalResult, int]] = {}

    def train(cfg: GridConfig, lam: float) -> tuple[TrainLog, EvalResult, int]:
        key = (cfg, lam)
        if key not in cache:
            if progress:
                progress(f"training rows={cfg.rows} cols={cfg.cols} {cfg.to_json()} lam={lam}")
            params = build(cfg, model_seed)
            tc = replace(train_config, lam=lam)
            params, log = fit(params, train_pairs, tc)
            cache[key] = (log, evaluate(params, test_pairs), params.count())
        return cache[key]

    report = AblationReport([])

    def add(group: str, label: str, cfg: GridConfig, lam: float) -> None:
        log, res, n = train(cfg, lam)
        report.rows.append(AblationRow(group, label, cfg.rows, cfg.cols, n, log.steps[-1].loss,
                                       res.psnr, res.ssim))
        report.logs[(group, label)] = log

    hazy = evaluate(None, test_pairs)
    report.rows.append(AblationRow("baseline", "hazy input", 0, 0, 0, math.nan, hazy.psnr, hazy.ssim))
    for group, members in GROUPS.items():
        chosen = [v for v in members if v in variants]
        # a lone "full" row only makes a table in the catch-all group
        if not chosen or chosen == ["full"] and group != "variants":
            continue
        for v in chosen:
            lam = 0.0 if v == "no_perceptual" else train_config.lam
            add(group, LABELS.get((group, v), v), apply_ablation(base_config, v), lam)
    for r, c in grid_sizes:
        add("grid", f"{r}x{c}", _grid_config(base_config, r, c), train_config.lam)
    return report
