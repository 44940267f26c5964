"""SGD training, patient-level folds, evaluation and cross-validation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import DESK_ARCH, FULL_ARCH, ArchConfig
from .losses import LossConfig, mil_loss, seg_loss, total_loss
from .metrics import MetricsReport, aggregate_folds, evaluate_predictions, write_report
from .network import M2UNetNet
from .phantom import CaseRecord, read_case
from .preprocess import Entry, balance_by_duplication, body_crop, build_bag, tile_positions, window_and_normalize
from .gcp import gcp_regularize
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    power: float = 0.75
    batch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the data."""

    optim: OptimConfig = OptimConfig()
    loss: LossConfig = LossConfig()
    arch: ArchConfig = DESK_ARCH
    bag_size: int = 200
    patch_size: int = 128
    crop_min_size: int = 256
    eval_draws: int = 1
    eval_chunk: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(optim=OptimConfig(**d["optim"]), loss=LossConfig(**d["loss"]), arch=ArchConfig(**d["arch"]),
                   **{k: v for k, v in d.items() if k not in ("optim", "loss", "arch")})


PAPER_PROFILE = TrainConfig(optim=OptimConfig(epochs=100), arch=FULL_ARCH, bag_size=200, patch_size=128)
DESK_PROFILE = TrainConfig(optim=OptimConfig(epochs=20), bag_size=32, patch_size=32, crop_min_size=64)


class TrainingDivergedError(RuntimeError):
    pass


def poly_lr(epoch: int, cfg: OptimConfig) -> float:
    """``lr0 * (1 - epoch / epochs) ** power``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs) ** cfg.power


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def sgd_step(params: ParamStore, state: SGDState, lr: float, cfg: OptimConfig, concepts: Sequence[str] = ()) -> None:
    """Momentum SGD with coupled weight decay, then unit-normalise concept rows."""
    for name in params:
        p = params[name]
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        v = state.velocity.get(name)
        step = p.grad + cfg.weight_decay * p.data
        v = step if v is None else cfg.momentum * v + step
        state.velocity[name] = v
        p.data = p.data - lr * v
    for name in concepts:
        gcp_regularize(params[name])


# ---------------------------------------------------------------------------
# data


@dataclass
class CaseData:
    record: CaseRecord
    volume: np.ndarray          # cropped + windowed, float32
    mask: np.ndarray | None     # cropped lobe labels

    @property
    def label(self) -> int:
        return self.record.label

    @property
    def patient_id(self) -> str:
        return self.record.patient_id


def prepare_case(volume: np.ndarray, mask: np.ndarray | None, crop_min_size: int) -> tuple[np.ndarray, np.ndarray | None]:
    cropped, box = body_crop(volume, crop_min_size)
    win = window_and_normalize(cropped).astype(np.float32)
    return win, (mask[box] if mask is not None else None)


def load_cases(root, records: Sequence[CaseRecord], crop_min_size: int = 256) -> list[CaseData]:
    out = []
    for r in records:
        vol, mask, _ = read_case(root, r)
        win, m = prepare_case(vol, mask, crop_min_size)
        out.append(CaseData(r, win, m))
    return out


@dataclass
class FoldPlan:
    """Five disjoint patient subsets; fold ``i`` tests on subset ``i``."""

    subsets: list[list[str]]
    val_fraction: float = 0.125
    seed: int = 0

    def roles(self, fold: int) -> dict[str, list[str]]:
        test = list(self.subsets[fold])
        rest = sorted(p for i, s in enumerate(self.subsets) if i != fold for p in s)
        rng = np.random.default_rng([self.seed, fold])
        n_val = max(1, int(round(self.val_fraction * len(rest)))) if self.val_fraction > 0 else 0
        perm = rng.permutation(len(rest))
        val = sorted(rest[i] for i in perm[:n_val])
        train = sorted(rest[i] for i in perm[n_val:])
        return {"train": train, "val": val, "test": test}

    def to_dict(self) -> dict:
        return asdict(self)


def make_folds(records, seed: int = 0, n_folds: int = 5, val_fraction: float = 0.125) -> FoldPlan:
    """Patient-level partition into ``n_folds`` subsets whose sizes differ by at most one.

    With five folds the test subset is 20% and ``val_fraction`` of the other
    patients (12.5% of 80% = 10%) is held out for validation.
    """
    patients = sorted({r.patient_id for r in records})
    if len(patients) < n_folds:
        raise ValueError(f"need at least {n_folds} patients, got {len(patients)}")
    perm = np.random.default_rng(seed).permutation(len(patients))
    subsets = [sorted(patients[i] for i in perm[k::n_folds]) for k in range(n_folds)]
    return FoldPlan(subsets, val_fraction, seed)


# ---------------------------------------------------------------------------
# training


def _bag_for(case: CaseData, cfg: TrainConfig, rng: np.random.Generator):
    return build_bag(case.volume, case.mask, case.label, cfg.bag_size, cfg.patch_size, rng, case.record.case_id)


def _zero_grads(params: ParamStore) -> None:
    for name in params:
        p = params[name]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train_fold(train: Sequence[CaseData], cfg: TrainConfig, val: Sequence[CaseData] = (),
               net: M2UNetNet | None = None, log_path=None) -> tuple[M2UNetNet, list[dict]]:
    """Train a fresh network on ``train``; returns it and per-epoch log rows.

    Severe cases are duplicated within ``train`` only.  Steps whose loss is
    identically zero (lambda = 0 and no mask) skip the forward pass but
    still take the decay/momentum step.
    """
    oc, lc = cfg.optim, cfg.loss
    net = net or M2UNetNet(cfg.arch, seed=oc.seed)
    entries = balance_by_duplication(train, seed=oc.seed)
    state = SGDState()
    rows = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(oc.epochs):
            lr = poly_lr(epoch, oc)
            order = np.random.default_rng([oc.seed, epoch]).permutation(len(entries))
            sums = {"mil": 0.0, "seg": 0.0, "total": 0.0}
            n_mil = n_seg = 0
            for step_i, start in enumerate(range(0, len(order), oc.batch)):
                net.params.zero_grad()
                for j in order[start:start + oc.batch]:
                    entry: Entry = entries[j]
                    case: CaseData = entry.record
                    bag = _bag_for(case, cfg, np.random.default_rng([entry.seed, epoch]))
                    if lc.lam == 0 and bag.masks is None:
                        continue
                    enc = net.encode(bag.patches, training=True)
                    lm = None
                    if lc.lam > 0:
                        logits, _ = net.classify(enc)
                        lm = mil_loss(logits, bag.label)
                        sums["mil"] += lm.item()
                        n_mil += 1
                    ls = Tensor(0.0)
                    if bag.masks is not None:
                        ls = seg_loss(net.segment_logits(enc, training=True), bag.mask_list(), lc.dice_eps)
                        sums["seg"] += ls.item()
                        n_seg += 1
                    loss = ls if lm is None else total_loss(lm, ls, lc)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {step_i}")
                    sums["total"] += value
                    loss.backward()
                _zero_grads(net.params)
                sgd_step(net.params, state, lr, oc, concepts=("emb.concepts", "img.concepts"))
            row = {"epoch": epoch, "lr": lr,
                   "mil_loss": sums["mil"] / n_mil if n_mil else None,
                   "seg_loss": sums["seg"] / n_seg if n_seg else None,
                   "total_loss": sums["total"] / max(1, len(entries))}
            if val and lc.lam > 0:
                probs = predict_cases(net, val, cfg, seed=oc.seed + 1)
                labels = [c.label for c in val]
                row["val_accuracy"] = float(np.mean((np.asarray(probs) >= 0.5) == np.asarray(labels)))
            rows.append(row)
            log.info("epoch %d %s", epoch, row)
            if fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return net, rows


# ---------------------------------------------------------------------------
# evaluation


def predict_cases(net: M2UNetNet, cases: Sequence[CaseData], cfg: TrainConfig, seed: int = 0,
                  draws: int | None = None) -> list[float]:
    """Severe probability per case, averaged over ``draws`` random bags."""
    draws = draws or cfg.eval_draws
    probs = []
    for i, case in enumerate(cases):
        ps = []
        for d in range(draws):
            bag = _bag_for(case, cfg, np.random.default_rng([seed, i, d]))
            ps.append(net.predict_bag(bag.patches)[1])
        probs.append(float(np.mean(ps)))
    return probs


def segment_volume(net: M2UNetNet, volume: np.ndarray, patch_size: int, chunk: int = 64) -> np.ndarray:
    """Label map for a preprocessed volume by tiling every slice with patches."""
    d, h, w = volume.shape
    ys, xs = tile_positions(h, patch_size), tile_positions(w, patch_size)
    coords = [(z, y, x) for z in range(d) for y in ys for x in xs]
    out = np.zeros((d, h, w), dtype=np.uint8)
    for start in range(0, len(coords), chunk):
        part = coords[start:start + chunk]
        patches = np.stack([volume[z, y:y + patch_size, x:x + patch_size] for z, y, x in part])
        labels = net.segment_patches(patches)
        for (z, y, x), lab in zip(part, labels):
            out[z, y:y + patch_size, x:x + patch_size] = lab
    return out


def evaluate(net: M2UNetNet, cases: Sequence[CaseData], cfg: TrainConfig, seed: int = 0,
             classify: bool = True, segment: bool = True) -> MetricsReport:
    labels = [c.label for c in cases]
    probs = predict_cases(net, cases, cfg, seed) if classify else [0.5] * len(cases)
    pairs = []
    if segment:
        pairs = [(segment_volume(net, c.volume, cfg.patch_size, cfg.eval_chunk), c.mask)
                 for c in cases if c.mask is not None]
    report = evaluate_predictions(labels, probs, pairs, cfg.arch.n_seg_classes)
    if not classify:
        report.classification, report.auc, report.roc, report.margins = {}, None, [], {}
    return report


def split_cases(cases: Sequence[CaseData], plan: FoldPlan, fold: int) -> dict[str, list[CaseData]]:
    roles = plan.roles(fold)
    by_role = {k: set(v) for k, v in roles.items()}
    return {k: [c for c in cases if c.patient_id in pats] for k, pats in by_role.items()}


def cross_validate(cases: Sequence[CaseData], cfg: TrainConfig, plan: FoldPlan, out_dir=None,
                   folds: Sequence[int] | None = None) -> dict:
    """Train and test every fold; returns per-fold flat metrics and their aggregate."""
    out_dir = Path(out_dir) if out_dir else None
    per_fold, reports = [], []
    for fold in folds if folds is not None else range(len(plan.subsets)):
        split = split_cases(cases, plan, fold)
        fold_cfg = replace(cfg, optim=replace(cfg.optim, seed=cfg.optim.seed + fold))
        fdir = out_dir / f"fold{fold}" if out_dir else None
        if fdir:
            fdir.mkdir(parents=True, exist_ok=True)
        net, rows = train_fold(split["train"], fold_cfg, split["val"],
                               log_path=fdir / "train_log.jsonl" if fdir else None)
        report = evaluate(net, split["test"], fold_cfg, seed=cfg.optim.seed + 1000 + fold,
                          classify=cfg.loss.lam > 0)
        if fdir:
            net.save(fdir / "model.ckpt", {"fold": fold, "fold_seed": plan.seed, "config": fold_cfg.to_dict()})
            write_report(fdir, "test_report", report)
        per_fold.append(report.flat())
        reports.append(report)
        log.info("fold %d: %s", fold, report.flat())
    return {"folds": per_fold, "aggregate": aggregate_folds(per_fold), "reports": reports}
