"""Input validation shared by the estimator API and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_volume(volume, name: str = "volume") -> np.ndarray:
    """A finite 3D array, returned as float64."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"{name} must be 3D (D, H, W), got shape {v.shape}")
    if min(v.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite values")
    return v


def check_volumes(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError("expected a sequence of volumes, got a single 3D array; wrap it in a list")
    vols = [check_volume(v, f"X[{i}]") for i, v in enumerate(X)]
    if not vols:
        raise ValueError("need at least one volume")
    return vols


def check_labels(y, n: int) -> np.ndarray:
    lab = np.asarray(y)
    if lab.ndim != 1 or lab.shape[0] != n:
        raise ValueError(f"y must be 1D with {n} entries, got shape {lab.shape}")
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("y must be binary (0 = non-severe, 1 = severe)")
    return lab.astype(int)


def check_masks(masks, volumes: Sequence[np.ndarray], n_classes: int) -> list[np.ndarray | None]:
    """Per-volume optional label maps; ``None`` entries stay ``None``."""
    if masks is None:
        return [None] * len(volumes)
    masks = list(masks)
    if len(masks) != len(volumes):
        raise ValueError(f"got {len(masks)} masks for {len(volumes)} volumes")
    out = []
    for i, (m, v) in enumerate(zip(masks, volumes)):
        if m is None:
            out.append(None)
            continue
        arr = np.asarray(m)
        if arr.shape != v.shape:
            raise ValueError(f"masks[{i}] shape {arr.shape} does not match volume {v.shape}")
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"masks[{i}] labels must lie in [0, {n_classes})")
        out.append(arr.astype(np.uint8))
    return out


def check_bag(patches) -> np.ndarray:
    """Patches ``[n, S, S]`` with S divisible by 16 and values in [0, 255]."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] < 1:
        raise ValueError(f"a bag must be a non-empty [n, S, S] array, got {p.shape}")
    if p.shape[1] % 16 or p.shape[2] % 16:
        raise ValueError(f"patch extents must be divisible by 16, got {p.shape[1:]}")
    if not np.isfinite(p).all() or p.min() < 0 or p.max() > 255:
        raise ValueError("patch intensities must be finite and lie in [0, 255]")
    return p
