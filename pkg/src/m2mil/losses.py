"""Training objectives: bag cross-entropy, segmentation CE + Dice, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, log_softmax, tsum

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    n_seg_classes: int = 6
    dice_eps: float = DICE_EPS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def mil_loss(logits: Tensor, y: int) -> Tensor:
    """Negative log softmax probability of the true bag label."""
    if logits.ndim != 1:
        raise ValueError(f"mil_loss: expected a logit vector, got {logits.shape}")
    if int(y) != y or not 0 <= y < logits.shape[0]:
        raise ValueError(f"mil_loss: invalid label {y!r} for {logits.shape[0]} classes")
    return -log_softmax(logits, axis=0)[int(y)]


def seg_loss(logits: Tensor, masks: Sequence[np.ndarray | None], eps: float = DICE_EPS) -> Tensor:
    """Mean over mask-bearing patches of pixel-mean CE plus the per-class Dice terms.

    Each class contributes ``1 - (2 * inter + eps) / (sum_p + sum_l + eps)``,
    so a class absent from both prediction and mask contributes 0.  Patches
    whose mask is ``None`` are skipped; with no masks the result is an exact
    zero constant.
    """
    n, c, h, w = logits.shape
    if len(masks) != n:
        raise ValueError(f"seg_loss: {len(masks)} masks for {n} patches")
    idx = [i for i, m in enumerate(masks) if m is not None]
    if not idx:
        return Tensor(0.0)
    labels = np.stack([np.asarray(masks[i]) for i in idx])
    if labels.shape[1:] != (h, w):
        raise ValueError(f"seg_loss: mask extents {labels.shape[1:]} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"seg_loss: mask labels must lie in [0, {c})")
    onehot = (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(np.float64)

    sel = logits if len(idx) == n else logits[np.asarray(idx)]
    logp = log_softmax(sel, axis=1)
    ce = -tsum(logp * onehot, axis=(1, 2, 3)) * (1.0 / (h * w))
    prob = logp.exp()
    inter = tsum(prob * onehot, axis=(2, 3))
    psum = tsum(prob, axis=(2, 3))
    lsum = onehot.sum(axis=(2, 3))
    dice = 1.0 - (inter * 2.0 + eps) / (psum + (lsum + eps))
    per_patch = ce + tsum(dice, axis=1)
    return tsum(per_patch) * (1.0 / len(idx))


def total_loss(mil: Tensor, seg: Tensor, cfg: LossConfig | float) -> Tensor:
    lam = cfg.lam if isinstance(cfg, LossConfig) else float(cfg)
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return mil * lam + seg
