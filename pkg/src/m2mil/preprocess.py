"""Volume preprocessing and bag construction."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

WINDOW_LOW = -1200.0
WINDOW_HIGH = 0.0
INTENSITY_MAX = 255.0


class EmptyForegroundError(ValueError):
    """Raised when a volume has no voxel above the air threshold."""


@dataclass
class Bag:
    case_id: str
    patches: np.ndarray              # [n, S, S] in [0, 255]
    masks: np.ndarray | None         # [n, S, S] lobe labels
    label: int
    slices: np.ndarray               # source slice of each patch
    corners: np.ndarray              # [n, 2] (row, col) of each patch origin

    def __len__(self) -> int:
        return self.patches.shape[0]

    def mask_list(self) -> list:
        return [None] * len(self) if self.masks is None else list(self.masks)


def window_and_normalize(volume: np.ndarray) -> np.ndarray:
    """Clamp to the pulmonary window [-1200, 0] and map it linearly onto [0, 255]."""
    v = np.clip(np.asarray(volume, dtype=np.float64), WINDOW_LOW, WINDOW_HIGH)
    return (v - WINDOW_LOW) * (INTENSITY_MAX / (WINDOW_HIGH - WINDOW_LOW))


def body_crop(volume: np.ndarray, min_size: int = 256) -> tuple[np.ndarray, tuple[slice, slice, slice]]:
    """Crop a raw pseudo-HU volume to the body.

    Voxels above -1200 are foreground; the bounding box of the largest
    6-connected foreground component is kept and its axial extents are grown
    symmetrically to ``min_size`` (or the full extent when smaller).
    """
    fg = np.asarray(volume) > WINDOW_LOW
    if not fg.any():
        raise EmptyForegroundError("volume has no foreground above -1200; not a body scan")
    labels, count = ndimage.label(fg)
    if count > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        fg = labels == sizes.argmax()
    box = list(ndimage.find_objects(fg.astype(np.int8))[0])
    for axis in (1, 2):
        extent = volume.shape[axis]
        want = min(min_size, extent)
        lo, hi = box[axis].start, box[axis].stop
        if hi - lo < want:
            grow = want - (hi - lo)
            lo = max(0, lo - grow // 2)
            hi = lo + want
            if hi > extent:
                hi = extent
                lo = extent - want
        box[axis] = slice(lo, hi)
    box = tuple(box)
    return volume[box], box


def build_bag(volume: np.ndarray, mask: np.ndarray | None, label: int, n: int, size: int,
              rng: np.random.Generator, case_id: str = "") -> Bag:
    """Sample ``n`` axial ``size x size`` patches at uniform random positions."""
    if n < 1:
        raise ValueError(f"bag size must be positive, got {n}")
    d, h, w = volume.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds axial extents {h}x{w}")
    if mask is not None and mask.shape != volume.shape:
        raise ValueError(f"mask {mask.shape} does not match volume {volume.shape}")
    zs = rng.integers(0, d, n)
    ys = rng.integers(0, h - size + 1, n)
    xs = rng.integers(0, w - size + 1, n)
    patches = np.empty((n, size, size))
    masks = np.empty((n, size, size), dtype=np.uint8) if mask is not None else None
    for i, (z, y, x) in enumerate(zip(zs, ys, xs)):
        patches[i] = volume[z, y:y + size, x:x + size]
        if masks is not None:
            masks[i] = mask[z, y:y + size, x:x + size]
    return Bag(case_id, patches, masks, int(label), zs, np.stack([ys, xs], axis=1))


@dataclass(frozen=True)
class Entry:
    """One training slot: a record plus the seed its bag is sampled with."""

    record: object
    replica: int
    seed: int


def balance_by_duplication(records, seed: int = 0) -> list[Entry]:
    """Repeat severe records until they are at least as many as non-severe ones.

    Every record is repeated the same number of times; each copy gets its
    own sampling seed so the resulting bags differ.
    """
    records = list(records)
    severe = [r for r in records if _label(r) == 1]
    mild = [r for r in records if _label(r) == 0]
    factor = 1
    if not severe:
        warnings.warn("no severe cases in the training split; skipping duplication")
    elif len(severe) < len(mild):
        factor = math.ceil(len(mild) / len(severe))
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=len(records) * factor)
    out, k = [], 0
    for r in records:
        copies = factor if _label(r) == 1 else 1
        for rep in range(copies):
            out.append(Entry(r, rep, int(seeds[k])))
            k += 1
    return out


def _label(r) -> int:
    if hasattr(r, "label"):
        return int(r.label)
    return int(r["label"])


def tile_positions(extent: int, size: int) -> list[int]:
    """Patch origins covering ``[0, extent)`` with the last tile flush to the end."""
    if size > extent:
        raise ValueError(f"tile size {size} exceeds extent {extent}")
    pos = list(range(0, extent - size + 1, size))
    if pos[-1] != extent - size:
        pos.append(extent - size)
    return pos
