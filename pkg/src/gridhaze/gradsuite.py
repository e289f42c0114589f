"""Finite-difference checks for every differentiable primitive and the full network."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import graph as G
from .graph import GradCheckResult, Tensor
from .losses import FeatureNet, total_loss
from .network import build, dehaze, reduced_config

PRIMITIVE_TOL = 1e-5
NETWORK_TOL = 1e-4


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # random projection so every output element contributes a distinct weight
    return G.mean_all(G.mul(y, Tensor(w)))


def _leaf(rng, shape, lo=-1.0, hi=1.0, away_from=None, margin=0.05) -> Tensor:
    data = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        for k in np.atleast_1d(away_from):
            near = np.abs(data - k) < margin
            data[near] = k + np.where(data[near] >= k, margin, -margin) * 2
    return Tensor(data, requires_grad=True)


def _primitive_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    def unary(name, op, shape=(2, 3, 5, 5), **leaf_kw):
        x = _leaf(rng, shape, **leaf_kw)
        w = rng.standard_normal(op(x.detach()).shape)
        cases.append((name, lambda: _weighted_sum(op(x), w), [x]))

    def binary(name, op, shape=(2, 3, 4, 4)):
        a, b = _leaf(rng, shape), _leaf(rng, shape)
        w = rng.standard_normal(op(a.detach(), b.detach()).shape)
        cases.append((name, lambda: _weighted_sum(op(a, b), w), [a, b]))

    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)):
        x = _leaf(rng, (2, 3, 7, 6))
        wt = _leaf(rng, (4, 3, k, k))
        bs = _leaf(rng, (4,))
        out = G.conv2d(x.detach(), wt.detach(), bs.detach(), stride=stride, padding=pad)
        proj = rng.standard_normal(out.shape)
        cases.append((f"conv2d k{k} s{stride} p{pad}",
                      lambda x=x, wt=wt, bs=bs, s=stride, p=pad, pr=proj:
                      _weighted_sum(G.conv2d(x, wt, bs, stride=s, padding=p), pr),
                      [x, wt, bs]))
    for pad, opad in ((1, 1), (0, 0), (1, 0)):
        x = _leaf(rng, (2, 4, 4, 3))
        wt = _leaf(rng, (4, 3, 3, 3))
        bs = _leaf(rng, (3,))
        out = G.transposed_conv2d(x.detach(), wt.detach(), bs.detach(), 2, pad, opad)
        proj = rng.standard_normal(out.shape)
        cases.append((f"transposed_conv2d p{pad} op{opad}",
                      lambda x=x, wt=wt, bs=bs, p=pad, o=opad, pr=proj:
                      _weighted_sum(G.transposed_conv2d(x, wt, bs, 2, p, o), pr),
                      [x, wt, bs]))

    unary("relu", G.relu, away_from=0.0)
    unary("sigmoid", G.sigmoid, lo=-4, hi=4)
    unary("square", G.square)
    unary("scale", lambda x: G.scale(x, -1.7))
    unary("smooth_l1_elementwise", G.smooth_l1_elementwise, lo=-3, hi=3, away_from=(-1.0, 1.0))
    unary("slice_channels", lambda x: G.slice_channels(x, 1, 3))
    unary("mean_spatial", G.mean_spatial)
    unary("mean_all", G.mean_all)
    binary("add", G.add)
    binary("sub", G.sub)
    binary("mul", G.mul)
    binary("concat_channels", lambda a, b: G.concat_channels(a, b))

    for label, wshape in (("per-channel", (3,)), ("shared", (1,))):
        x = _leaf(rng, (2, 3, 4, 4))
        aw = _leaf(rng, wshape)
        proj = rng.standard_normal((2, 3, 4, 4))
        cases.append((f"scale_channel {label}",
                      lambda x=x, aw=aw, pr=proj: _weighted_sum(G.scale_channel(x, aw), pr), [x, aw]))

    hazy = _leaf(rng, (2, 3, 5, 5), 0.2, 0.9)
    t = _leaf(rng, (2, 1, 5, 5), 0.2, 0.9)
    a = _leaf(rng, (2, 1, 1, 1), 0.7, 1.0)
    proj = rng.standard_normal((2, 3, 5, 5))
    cases.append(("invert_scattering",
                  lambda: _weighted_sum(G.invert_scattering(hazy, t, a), proj), [hazy, t, a]))
    return cases


def _network_cases(rng, size: int = 16, coords: int = 4):
    featnet = FeatureNet.create(1234).astype(np.float64)
    cases = []
    for head in ("direct", "indirect"):
        cfg = replace(reduced_config(), head=head)
        params = build(cfg, seed=3).astype(np.float64)
        # nudge attention weights off their shared init so each branch is distinguishable
        for name, tensor in params.items():
            if ".attn" in name:
                tensor.data = tensor.data + rng.uniform(-0.2, 0.2, tensor.shape)
        x = Tensor(rng.uniform(0.1, 0.9, (1, 3, size, size)), requires_grad=True)
        gt = Tensor(rng.uniform(0, 1, (1, 3, size, size)))
        names = sorted(params.tensors)
        picked = [params[n] for n in names[:: max(1, len(names) // 12)]]
        fn = lambda x=x, gt=gt, params=params: total_loss(
            dehaze(x, params, clamp=False), gt, 0.04, featnet)
        cases.append((f"network end-to-end ({head} head)", fn, [x] + picked, coords))
    return cases


def run_suite(seed: int = 0, include_network: bool = True,
              report: Callable[[GradCheckResult], None] | None = None) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, leaves in _primitive_cases(rng):
        err = G.check_gradients(fn, leaves)
        results.append(GradCheckResult(name, err, sum(t.data.size for t in leaves), PRIMITIVE_TOL))
        if report:
            report(results[-1])
    if include_network:
        for name, fn, leaves, coords in _network_cases(rng):
            rep = G.probe_gradients(fn, leaves, max_coords=coords, seed=seed)
            results.append(GradCheckResult(name, rep.max_rel_error, rep.checked, NETWORK_TOL,
                                           rep.skipped))
            if report:
                report(results[-1])
    return results


def format_result(r: GradCheckResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    line = f"{status}  {r.name:<38} max rel err {r.max_rel_error:.3e}  (tol {r.tolerance:g}, {r.checked} coords"
    if r.skipped:
        line += f", {r.skipped} skipped at kinks"
    return line + ")"


if __name__ == "__main__":  # pragma: no cover
    t0 = time.time()
    res = run_suite(report=lambda r: print(format_result(r), flush=True))
    print(f"{sum(r.passed for r in res)}/{len(res)} passed in {time.time() - t0:.1f}s")
