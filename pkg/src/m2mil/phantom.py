"""Synthetic chest-CT phantoms with lobe labels and severity-determining infection.

Geometry, in normalised coordinates ``(z, y, x)`` spanning ``[-1, 1]``:

* an elliptic-cylinder body (about 0 pseudo-HU) surrounded by air (-1200);
* two ellipsoidal lungs, the right one (image left) split by two oblique
  planes into three lobes and the left one into two;
* each lobe has its own mean attenuation around -800, so lobes are
  distinguishable from local appearance as well as position;
* Gaussian infection blobs (about -300) restricted to the lungs.

A voxel counts as infected where the blob weight is at least 1/2.  The
severity label is ``infected_lung_voxels / lung_voxels >= tau``.

On disk a dataset is ``manifest.json`` plus, per case, ``cases/<id>.json``
(sidecar: extents, spacing, dtypes, flags), ``cases/<id>.vol`` (raw
little-endian float32 voxels, C order) and optionally ``cases/<id>.mask``
(raw uint8 labels).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

AIR_HU = -1200.0
BODY_HU = 0.0
INFECTION_HU = -300.0
# infected tissue moves this far towards INFECTION_HU, keeping some lobe contrast
INFECTION_BLEND = 0.6
# labels 1..5: right upper, right middle, right lower, left upper, left lower
LOBE_HU = (-1100.0, -800.0, -500.0, -950.0, -650.0)
N_LOBES = 5
# semi-axes (y, x) of the elliptic body section, normalised coordinates
BODY_AXES = (0.85, 0.95)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PhantomConfig:
    depth: tuple[int, int] = (44, 52)
    height: tuple[int, int] = (92, 100)
    width: tuple[int, int] = (92, 100)
    spacing_z: tuple[float, float] = (0.6, 10.0)
    spacing_xy: tuple[float, float] = (0.5, 0.9)
    tau: float = 0.15
    severe_prob: float = 0.2
    # infected-fraction targets for the two generation regimes
    mild_fraction: tuple[float, float] = (0.0, 0.04)
    severe_fraction: tuple[float, float] = (0.25, 0.45)
    mild_sigma: tuple[float, float] = (1.0, 2.0)
    severe_sigma: tuple[float, float] = (4.0, 8.0)
    n_blobs: int | None = None  # exact blob count, overriding the fraction targets
    noise_hu: float = 12.0
    max_blobs: int = 400

    def __post_init__(self):
        for name in ("depth", "height", "width"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
        if self.depth[0] < 32 or self.height[0] < 64 or self.width[0] < 64:
            raise ValueError("phantom extents must be at least 32x64x64 so the lungs fit")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhantomConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Blob:
    center: tuple[float, float, float]  # voxel coordinates
    sigma: float


@dataclass
class Case:
    volume: np.ndarray          # float32 [D, H, W]
    mask: np.ndarray            # uint8 [D, H, W]
    severe: bool
    infected_fraction: float
    blobs: list[Blob] = field(default_factory=list)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def _grid(shape):
    d, h, w = shape
    z = np.linspace(-1, 1, d)[:, None, None]
    y = np.linspace(-1, 1, h)[None, :, None]
    x = np.linspace(-1, 1, w)[None, None, :]
    return z, y, x


def _body(y, x):
    return (y / BODY_AXES[0]) ** 2 + (x / BODY_AXES[1]) ** 2 <= 1.0


def lobe_labels(shape) -> np.ndarray:
    """Label map with 0 outside the lungs and 1..5 per lobe."""
    z, y, x = _grid(shape)
    body = _body(y, x)
    labels = np.zeros(shape, dtype=np.uint8)
    for side, cx in ((0, -0.45), (1, 0.45)):
        lung = ((z / 1.1) ** 2 + ((y + 0.05) / 0.68) ** 2 + ((x - cx) / 0.4) ** 2 <= 1.0) & body
        fissure = z + 0.6 * y
        if side == 0:
            part = np.where(fissure > 0.3, 1, np.where(fissure > -0.25, 2, 3))
        else:
            part = np.where(fissure > 0.0, 4, 5)
        labels[lung] = np.broadcast_to(part, shape)[lung]
    return labels


def _blob_weight(shape, blob: Blob) -> np.ndarray:
    d, h, w = shape
    cz, cy, cx = blob.center
    zz = (np.arange(d) - cz)[:, None, None] ** 2
    yy = (np.arange(h) - cy)[None, :, None] ** 2
    xx = (np.arange(w) - cx)[None, None, :] ** 2
    return np.exp(-(zz + yy + xx) / (2 * blob.sigma ** 2))


BLOB_RADIUS_SIGMAS = 4.0


def _stamp_blob(weight: np.ndarray, blob: Blob, lung: np.ndarray) -> int:
    """Max-accumulate ``blob`` into ``weight`` inside a +-4 sigma box and
    return how many lung voxels became infected.

    The Gaussian is below 4e-4 outside the box, far under the 1/2 infection
    cut, so the infected set is the same as with the untruncated profile.
    """
    r = BLOB_RADIUS_SIGMAS * blob.sigma
    box = tuple(slice(max(0, int(np.floor(c - r))), min(n, int(np.ceil(c + r)) + 1))
                for c, n in zip(blob.center, weight.shape))
    axes = [(np.arange(sl.start, sl.stop) - c) ** 2 for sl, c in zip(box, blob.center)]
    sq = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    region, inside = weight[box], lung[box]
    before = int(((region >= 0.5) & inside).sum())
    np.maximum(region, np.exp(-sq / (2 * blob.sigma ** 2)), out=region)
    return int(((region >= 0.5) & inside).sum()) - before


def generate_case(seed: int, config: PhantomConfig = PhantomConfig()) -> Case:
    """Deterministic phantom for ``seed``."""
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(config.depth[0], config.depth[1] + 1)),
             int(rng.integers(config.height[0], config.height[1] + 1)),
             int(rng.integers(config.width[0], config.width[1] + 1)))
    spacing = (float(rng.uniform(*config.spacing_z)),
               float(rng.uniform(*config.spacing_xy)),
               float(rng.uniform(*config.spacing_xy)))
    z, y, x = _grid(shape)
    labels = lobe_labels(shape)
    lung = labels > 0
    n_lung = int(lung.sum())
    if n_lung == 0:
        raise ValueError(f"lungs do not fit extents {shape}")

    severe_regime = rng.random() < config.severe_prob
    lo, hi = config.severe_fraction if severe_regime else config.mild_fraction
    target = rng.uniform(lo, hi)
    sig_lo, sig_hi = config.severe_sigma if severe_regime else config.mild_sigma

    weight = np.zeros(shape)
    blobs: list[Blob] = []
    lung_idx = np.flatnonzero(lung)
    limit = config.n_blobs if config.n_blobs is not None else config.max_blobs
    n_infected = 0
    while len(blobs) < limit:
        if config.n_blobs is None and n_infected / n_lung >= target:
            break
        centre = np.unravel_index(lung_idx[rng.integers(lung_idx.size)], shape)
        blob = Blob(tuple(float(c) for c in centre), float(rng.uniform(sig_lo, sig_hi)))
        blobs.append(blob)
        n_infected += _stamp_blob(weight, blob, lung)
    weight[~lung] = 0.0

    body = np.broadcast_to(_body(y, x), shape)
    vol = np.full(shape, AIR_HU)
    vol[body] = BODY_HU + config.noise_hu * rng.standard_normal(int(body.sum()))
    base = np.zeros(shape)
    for lab, hu in enumerate(LOBE_HU, start=1):
        base[labels == lab] = hu
    lung_vals = base[lung] + config.noise_hu * rng.standard_normal(n_lung)
    w_l = weight[lung]
    vol[lung] = lung_vals + (INFECTION_HU - lung_vals) * (INFECTION_BLEND * w_l)
    # air stays at or below the window floor so thresholding separates it cleanly
    air = ~body
    vol[air] = AIR_HU - np.abs(config.noise_hu * rng.standard_normal(int(air.sum())))

    infected = int((w_l >= 0.5).sum())
    frac = infected / n_lung
    return Case(vol.astype(np.float32), labels, frac >= config.tau, frac, blobs, spacing)


def infected_fraction(case_shape, labels: np.ndarray, blobs: list[Blob]) -> float:
    """Recompute the infected share of lung voxels from blob parameters."""
    lung = labels > 0
    weight = np.zeros(case_shape)
    for b in blobs:
        np.maximum(weight, _blob_weight(case_shape, b), out=weight)
    return float(((weight >= 0.5) & lung).sum() / lung.sum())


# ---------------------------------------------------------------------------
# on-disk format


class DatasetError(Exception):
    """Base class for dataset read failures."""


class CorruptHeaderError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class ExtentMismatchError(DatasetError):
    pass


@dataclass
class CaseRecord:
    case_id: str
    volume_path: str
    mask_path: str | None
    severe: bool
    patient_id: str
    infected_fraction: float | None = None

    @property
    def label(self) -> int:
        return int(self.severe)

    def to_dict(self) -> dict:
        return asdict(self)


def write_case(root, case_id: str, volume: np.ndarray, mask: np.ndarray | None,
               spacing=(1.0, 1.0, 1.0)) -> tuple[str, str | None]:
    """Write one case; returns the volume and mask paths relative to ``root``."""
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)
    vol = np.ascontiguousarray(volume, dtype="<f4")
    rel_vol = f"cases/{case_id}.vol"
    rel_mask = f"cases/{case_id}.mask" if mask is not None else None
    sidecar = {"extents": list(vol.shape), "spacing": list(spacing), "dtype": "f32",
               "mask_dtype": "u8" if mask is not None else None}
    if mask is not None and mask.shape != vol.shape:
        raise ExtentMismatchError(f"{case_id}: mask {mask.shape} vs volume {vol.shape}")
    (root / "cases" / f"{case_id}.json").write_text(json.dumps(sidecar, sort_keys=True))
    (root / rel_vol).write_bytes(vol.tobytes())
    if mask is not None:
        (root / rel_mask).write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return rel_vol, rel_mask


def _read_raw(path: Path, dtype, shape) -> np.ndarray:
    raw = path.read_bytes()
    need = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise ExtentMismatchError(f"{path}: {len(raw)} bytes exceed declared extents {tuple(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_case(root, record: CaseRecord) -> tuple[np.ndarray, np.ndarray | None, tuple]:
    """Load ``(volume, mask or None, spacing)`` for ``record``."""
    root = Path(root)
    sidecar_path = (root / record.volume_path).with_suffix(".json")
    try:
        meta = json.loads(sidecar_path.read_text())
        shape = tuple(int(v) for v in meta["extents"])
        spacing = tuple(float(v) for v in meta["spacing"])
        if meta["dtype"] != "f32" or len(shape) != 3:
            raise ValueError(meta["dtype"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{sidecar_path}: unreadable sidecar ({exc})") from exc
    volume = _read_raw(root / record.volume_path, "<f4", shape)
    mask = None
    if record.mask_path is not None:
        mask = _read_raw(root / record.mask_path, np.uint8, shape)
    return volume, mask, spacing


def write_manifest(root, records: list[CaseRecord], config: dict | None = None) -> None:
    doc = {"version": MANIFEST_VERSION, "generator": config or {},
           "cases": [r.to_dict() for r in records]}
    Path(root, "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_manifest(root) -> list[CaseRecord]:
    path = Path(root, "manifest.json")
    try:
        doc = json.loads(path.read_text())
        return [CaseRecord(**c) for c in doc["cases"]]
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable manifest ({exc})") from exc


def generate_dataset(root, n_cases: int = 120, seed: int = 0, scans_per_patient: int = 3,
                     mask_fraction: float = 0.3, config: PhantomConfig = PhantomConfig()) -> list[CaseRecord]:
    """Generate ``n_cases`` phantoms under ``root`` and write the manifest.

    Case ``i`` belongs to patient ``i // scans_per_patient``; scans of one
    patient share the severity regime draw only through their seeds, so
    they vary like repeat scans.  A ``mask_fraction`` share of cases, chosen
    by a seeded permutation, keeps its lobe mask.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be positive")
    root = Path(root)
    rng = np.random.default_rng(seed)
    case_seeds = rng.integers(0, 2**63 - 1, size=n_cases)
    n_masked = int(round(mask_fraction * n_cases))
    masked = set(rng.permutation(n_cases)[:n_masked].tolist())
    records = []
    for i in range(n_cases):
        case = generate_case(int(case_seeds[i]), config)
        cid = f"case{i:04d}"
        rel_vol, rel_mask = write_case(root, cid, case.volume, case.mask if i in masked else None, case.spacing)
        records.append(CaseRecord(cid, rel_vol, rel_mask, bool(case.severe), f"patient{i // scans_per_patient:03d}",
                                  round(case.infected_fraction, 6)))
    write_manifest(root, records, {"seed": seed, "n_cases": n_cases, "mask_fraction": mask_fraction,
                                   "scans_per_patient": scans_per_patient, **config.to_dict()})
    return records


def dataset_root_is_empty(root) -> bool:
    return not Path(root).exists() or not any(os.scandir(root))
