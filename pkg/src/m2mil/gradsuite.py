"""Finite-difference gradient suite over every hand-differentiated component.

Each entry draws a fresh generic point per trial (random inputs and
parameters) and compares reverse-mode gradients with central differences
for all entries of the probed tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import ArchConfig
from .gcp import gcp_forward
from .losses import mil_loss, seg_loss
from .milhead import classify_bag, embed_patches, init_head
from .tensor import ParamStore, RunningStats, Tensor, batchnorm2d, conv2d, gradcheck

TOLERANCE = 1e-4


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # a random linear functional makes every output entry matter
    return (y * w).sum()


def _conv_trials(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out_w = rng.standard_normal((2, 4, 6, 5))
    yield lambda t: _weighted_sum(conv2d(t, Tensor(w), Tensor(b), pad=1), out_w), x
    yield lambda t: _weighted_sum(conv2d(Tensor(x), t, Tensor(b), pad=1), out_w), w
    yield lambda t: _weighted_sum(conv2d(Tensor(x), Tensor(w), t, pad=1), out_w), b


def _bn_trials(rng):
    x = rng.standard_normal((3, 2, 3, 3)) * 2 + 0.5
    g = rng.uniform(0.5, 1.5, 2)
    b = rng.standard_normal(2)
    out_w = rng.standard_normal(x.shape)

    def f(xt, gt, bt):
        return _weighted_sum(batchnorm2d(xt, gt, bt, RunningStats.fresh(2), training=True), out_w)

    yield lambda t: f(t, Tensor(g), Tensor(b)), x
    yield lambda t: f(Tensor(x), t, Tensor(b)), g
    yield lambda t: f(Tensor(x), Tensor(g), t), b


def _gcp_trials(rng):
    k, p, d = rng.integers(2, 7), rng.integers(1, 5), rng.integers(2, 6)
    inst = rng.standard_normal((k, d))
    conc = rng.standard_normal((p, d))
    out_w = rng.standard_normal(p)
    yield lambda t: _weighted_sum(gcp_forward(t, Tensor(conc)), out_w), inst
    yield lambda t: _weighted_sum(gcp_forward(Tensor(inst), t), out_w), conc


def _mil_trials(rng):
    y = int(rng.integers(2))
    yield lambda t: mil_loss(t, y), rng.standard_normal(2) * 2


def _seg_trials(rng):
    n, c, s = 3, 4, 4
    masks = [rng.integers(0, c, (s, s)).astype(np.uint8), None, rng.integers(0, c, (s, s)).astype(np.uint8)]
    yield lambda t: seg_loss(t, masks), rng.standard_normal((n, c, s, s))


def _head_trials(rng):
    arch = ArchConfig(bottleneck=6, emb_concepts=5, img_concepts=4)
    params = ParamStore()
    init_head(arch, rng, params)
    feats = rng.standard_normal((4, 6, 2, 2))
    y = int(rng.integers(2))

    def f(feat, **override):
        ps = {name: params[name] for name in params}
        ps.update(override)
        logits, _ = classify_bag(embed_patches(feat, ps), ps)
        return mil_loss(logits, y)

    yield lambda t: f(t), feats
    yield lambda t: f(Tensor(feats), **{"emb.concepts": t}), params["emb.concepts"].data
    yield lambda t: f(Tensor(feats), **{"img.concepts": t}), params["img.concepts"].data
    yield lambda t: f(Tensor(feats), **{"emb.map.weight": t}), params["emb.map.weight"].data


SUITE: dict[str, Callable] = {
    "conv2d": _conv_trials,
    "batchnorm": _bn_trials,
    "gcp": _gcp_trials,
    "mil_loss": _mil_trials,
    "seg_loss": _seg_trials,
    "head": _head_trials,
}


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    passed: bool
    n_points: int
    seconds: float


def run_suite(n_points: int = 20, seed: int = 0, tol: float = TOLERANCE,
              names=None) -> list[SuiteResult]:
    """Check each component at ``n_points`` random points; one result per component."""
    results = []
    for name in names or SUITE:
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, list(SUITE).index(name)])
        worst, ok = 0.0, True
        for _ in range(n_points):
            for f, point in SUITE[name](rng):
                rep = gradcheck(f, point, tol=tol)
                worst = max(worst, rep.max_rel_error)
                ok = ok and bool(rep.passed)
        results.append(SuiteResult(name, worst, ok, n_points, time.perf_counter() - t0))
    return results
