"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 6 and 7 train for a few minutes each on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from gridhaze import graph as G
from gridhaze import haze as H
from gridhaze import losses as L
from gridhaze import network as N
from gridhaze import trainer as T
from gridhaze.checkpoint import load_checkpoint, save_checkpoint
from gridhaze.cli import main as cli_main
from gridhaze.gradsuite import run_suite
from gridhaze.graph import Tensor


# --- AC1 -------------------------------------------------------------------------------------------

def test_ac1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    prims = [r for r in results if not r.name.startswith("network")]
    nets = [r for r in results if r.name.startswith("network")]
    worst_p = max(r.max_rel_error for r in prims)
    worst_n = max(r.max_rel_error for r in nets)
    skipped = sum(r.skipped for r in nets)
    probed = skipped + sum(r.checked for r in nets)
    ok = (all(r.passed for r in results) and worst_p <= 1e-5 and worst_n <= 1e-4
          and elapsed < 120 and skipped <= 0.2 * probed)
    failed = ", ".join(r.name for r in results if not r.passed) or "none"
    assert verdict("AC1", ok, f"gradient suite: {len(prims)} primitives worst {worst_p:.2e} (<=1e-5), "
                   f"{len(nets)} end-to-end worst {worst_n:.2e} (<=1e-4), {skipped}/{probed} coords at kinks, "
                   f"{elapsed:.1f}s (<120s), failed: {failed}")


# --- AC2 -------------------------------------------------------------------------------------------

def test_ac2_haze_physics(verdict):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([2, i])
        clear = H.synthetic_scene(24, 24, seed=i) if i % 2 else Tensor(rng.random((1, 3, 24, 24)))
        depth = rng.random((24, 24))
        beta = rng.uniform(*H.INDOOR_BETA)
        A = rng.uniform(*H.INDOOR_AIRLIGHT)
        t = H.transmission(depth, beta)
        assert t.data.min() >= H.DEFAULT_T_FLOOR
        hazy = H.apply_haze(clear, t, A)
        back = H.invert_haze(hazy, t, A)
        worst = max(worst, float(np.abs(back.data - clear.data).max()))
    t_zero = H.transmission(np.zeros((4, 4)), 0.9).data
    t_half = H.transmission(np.ones((4, 4)), math.log(2)).data
    edge = max(float(np.abs(t_zero - 1).max()), float(np.abs(t_half - 0.5).max()))
    ok = worst <= 1e-5 and edge <= 1e-7
    assert verdict("AC2", ok, f"haze round trip max err {worst:.2e} over 100 scenes (<=1e-5); "
                   f"boundary cases err {edge:.1e} (<=1e-7)")


# --- AC3 -------------------------------------------------------------------------------------------

def test_ac3_shape_law(verdict):
    cfg = N.GridConfig()
    params = N.build(cfg, seed=0)
    size = 64
    _, nodes = N.forward(np.random.default_rng(3).random((1, 3, size, size)), params, return_nodes=True)
    bad = [(k, v.shape) for k, v in nodes.items()
           if v.shape != (1, cfg.channels_per_scale[k[0]], size >> k[0], size >> k[0])]
    junctions_ok = len(nodes) == cfg.rows * cfg.cols and not bad
    other = N.build(cfg, seed=1)
    same_table = [(k, v.shape) for k, v in params.items()] == [(k, v.shape) for k, v in other.items()]
    table_is_config = same_table and [(k, v.shape) for k, v in params.items()] == N.parameter_shapes(cfg)
    values_differ = any(not np.array_equal(params[k].data, other[k].data) for k in params)
    ok = junctions_ok and table_is_config and values_differ
    assert verdict("AC3", ok, f"{len(nodes)} junctions of the 3x6 grid at widths "
                   f"{list(cfg.channels_per_scale)}, mismatches: {bad or 'none'}; "
                   f"{len(params)} named tensors identical across seeds: {table_is_config}; values differ: {values_differ}")


# --- AC4 -------------------------------------------------------------------------------------------

def test_ac4_pruning_equivalence(verdict):
    cfg = N.GridConfig()
    params = N.build(cfg, seed=4)
    rng = np.random.default_rng(4)
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data = rng.uniform(-0.1, 0.1, t.shape).astype(np.float32)
    ed = N.apply_ablation(cfg, "encoder_decoder")
    masked = N.masked_attention(params)
    worst = 0.0
    for i in range(10):
        x = np.random.default_rng([4, i]).random((1, 3, 32, 32)).astype(np.float32)
        worst = max(worst, float(np.abs(N.forward(x, params, ed).data - N.forward(x, masked).data).max()))
    assert verdict("AC4", worst <= 1e-6, f"encoder-decoder vs masked full grid, 10 inputs, max abs diff {worst:.2e} (<=1e-6)")


# --- AC5 -------------------------------------------------------------------------------------------

def test_ac5_loss_formulas(verdict):
    z = np.zeros((2, 3, 8, 8))
    cases = [(0.0, 0.0), (0.5, 0.375), (2.0, 4.5)]
    errs = [abs(L.smooth_l1(z + e, z).item() - want) for e, want in cases]
    rng = np.random.default_rng(5)
    a, b = rng.random((2, 3, 16, 16)).astype(np.float32), rng.random((2, 3, 16, 16)).astype(np.float32)
    bitwise = L.total_loss(a, b, 0.0, L.FeatureNet.create()).data.tobytes() == L.smooth_l1(a, b).data.tobytes()

    def f(e):
        return float(G.smooth_l1_elementwise(Tensor(np.full((1, 1, 1, 1), e, dtype=np.float64))).data[0, 0, 0, 0])

    # value and one-sided slopes agree across |e| = 1
    h = 1e-6
    jumps = []
    for k in (1.0, -1.0):
        left = (f(k - h) - f(k - 2 * h)) / h
        right = (f(k + 2 * h) - f(k + h)) / h
        jumps += [abs(float(f(k + h) - f(k - h))), abs(float(right - left))]
    c1 = max(jumps) <= 1e-5
    ok = max(errs) <= 1e-6 and bitwise and c1
    assert verdict("AC5", ok, f"smooth L1 cases 0/0.375/4.5 max err {max(errs):.1e} (<=1e-6); "
                   f"lambda=0 bitwise equal: {bitwise}; C1 at |e|=1, max jump {max(jumps):.1e}")


# --- AC6 -------------------------------------------------------------------------------------------

def test_ac6_overfit_single_pair(verdict):
    pair = H.random_pairs(1, 64, seed=0)
    hazy_psnr = T.evaluate(None, pair).psnr
    params = N.build(N.reduced_config(), seed=0)
    tc = T.TrainConfig(patch_size=64, batch_size=1, lr0=1e-3, epochs=1000, max_steps=1000,
                       halve_every=10**6, seed=0)
    t0 = time.perf_counter()
    params, log = T.fit(params, pair, tc)
    elapsed = time.perf_counter() - t0
    final = T.evaluate(params, pair).psnr
    ok = len(log.steps) <= 1000 and final >= 30.0 and elapsed <= 600
    assert verdict("AC6", ok, f"overfit one 64x64 pair: {len(log.steps)} Adam steps, PSNR {hazy_psnr:.2f} -> "
                   f"{final:.2f} dB (>=30), {elapsed:.0f}s (<=600s)")


# --- AC7 -------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_data():
    train = H.random_pairs(16, 64, H.INDOOR_BETA, H.INDOOR_AIRLIGHT, seed=100)
    test = H.random_pairs(4, 64, H.INDOOR_BETA, H.INDOOR_AIRLIGHT, seed=200)
    return train, test


def test_ac7_generalization_smoke(verdict, smoke_data):
    train, test = smoke_data
    params = N.build(N.reduced_config(), seed=0)
    tc = T.TrainConfig(patch_size=32, batch_size=4, epochs=10**6, max_steps=2000, halve_every=10**6, seed=0)
    t0 = time.perf_counter()
    params, log = T.fit(params, train, tc)
    elapsed = time.perf_counter() - t0
    base = T.evaluate(None, test).psnr
    got = T.evaluate(params, test).psnr
    ok = len(log.steps) == 2000 and got - base >= 2.0
    assert verdict("AC7", ok, f"16 train / 4 test pairs, 2000 steps: test PSNR {base:.2f} (hazy) -> "
                   f"{got:.2f} dB, gain {got - base:+.2f} dB (>=2), {elapsed:.0f}s")


# --- AC8 -------------------------------------------------------------------------------------------

def test_ac8_direct_vs_indirect(verdict, smoke_data):
    train, test = smoke_data
    tc = T.TrainConfig(patch_size=32, batch_size=4, epochs=10**6, max_steps=200, halve_every=10**6, seed=0)
    report = T.run_ablation_suite(N.reduced_config(), train, test, variants=["full", "indirect_head"],
                                  train_config=tc)
    details, ok = [], True
    for label in ("direct", "indirect"):
        row = report.find("estimation", label)
        losses = report.logs[("estimation", label)].losses
        finite = bool(np.all(np.isfinite(losses)))
        head, tail = losses[:20].mean(), losses[-20:].mean()
        ok &= finite and len(losses) == 200 and tail < head
        details.append(f"{label} loss {head:.4f}->{tail:.4f} (PSNR {row.psnr:.2f})")
    md = report.to_markdown()
    ok &= "| direct |" in md and "| indirect |" in md
    assert verdict("AC8", ok, "200 steps per head, finite and decreasing: " + "; ".join(details)
                   + "; both rows in report")


# --- AC9 -------------------------------------------------------------------------------------------

def test_ac9_metric_identities(verdict):
    rng = np.random.default_rng(9)
    a = rng.random((1, 3, 32, 32))
    ident = L.psnr(a, a) == 100.0 and L.ssim(a, a) == 1.0
    log_case = abs(L.psnr(np.full((1, 3, 8, 8), 0.4), np.full((1, 3, 8, 8), 0.5)) - 20.0)
    ok = ident and log_case <= 1e-6
    assert verdict("AC9", ok, f"PSNR/SSIM identity exact (100 dB, 1.0): {ident}; MSE 0.01 -> 20 dB err {log_case:.1e} (<=1e-6)")


# --- AC10 ------------------------------------------------------------------------------------------

def test_ac10_determinism(verdict, tmp_path):
    ds = tmp_path / "ds"
    assert cli_main(["synth", "--clear-dir", str(tmp_path / "clear"), "--out", str(ds), "--count", "4",
                     "--seed", "10", "--procedural", "4", "--size", "32"]) == 0
    runs = []
    for name in ("a", "b"):
        argv = ["train", "--data", str(ds / "manifest.tsv"), "--eval-data", str(ds / "manifest.tsv"),
                "--out", str(tmp_path / name), "--patch", "32", "--batch", "2", "--epochs", "3",
                "--seed", "10", "--eval-every", "2"]
        assert cli_main(argv) == 0
        runs.append({f: (tmp_path / name / f).read_bytes()
                     for f in ("last.gdhz", "best.gdhz", "train_log.tsv", "eval_log.tsv")})
    files_equal = runs[0] == runs[1]

    ck = load_checkpoint(tmp_path / "a" / "last.gdhz")
    save_checkpoint(ck.params, ck.optimizer, tmp_path / "again.gdhz", ck.step, ck.seed)
    resave_equal = (tmp_path / "again.gdhz").read_bytes() == runs[0]["last.gdhz"]
    x = np.random.default_rng(10).random((1, 3, 32, 32)).astype(np.float32)
    reloaded = load_checkpoint(tmp_path / "again.gdhz")
    fwd_equal = N.forward(x, ck.params).data.tobytes() == N.forward(x, reloaded.params).data.tobytes()
    ok = files_equal and resave_equal and fwd_equal
    assert verdict("AC10", ok, f"two CLI train runs byte-identical (checkpoints + logs): {files_equal}; "
                   f"save/load/save identical: {resave_equal}; forward after reload bit-identical: {fwd_equal}")


if __name__ == "__main__":  # pragma: no cover
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
