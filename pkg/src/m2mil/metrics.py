"""Classification, ROC/AUC, segmentation-overlap and margin statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_counts(labels, probs, threshold: float = THRESHOLD) -> ConfusionCounts:
    y = np.asarray(labels).astype(int)
    pred = (np.asarray(probs, dtype=float) >= threshold).astype(int)
    return ConfusionCounts(int(((pred == 1) & (y == 1)).sum()), int(((pred == 0) & (y == 0)).sum()),
                           int(((pred == 1) & (y == 0)).sum()), int(((pred == 0) & (y == 1)).sum()))


def _ratio(num, den):
    return None if den == 0 else num / den


def classification_metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1; undefined ratios are ``None``."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return {"accuracy": _ratio(counts.tp + counts.tn, counts.total), "precision": precision,
            "recall": recall, "f1": f1}


def auc(probs, labels) -> tuple[float, np.ndarray]:
    """Rank (Mann-Whitney) AUC with half credit for ties, plus the ROC polyline.

    The polyline is an ``[m, 2]`` array of ``(fpr, tpr)`` points from (0, 0)
    to (1, 1), one vertex per distinct score.
    """
    s = np.asarray(probs, dtype=float)
    y = np.asarray(labels).astype(int)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative case")
    ranks = rankdata(s)
    value = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    points = [(0.0, 0.0)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        points.append((((pred) & (y == 0)).sum() / n_neg, ((pred) & (y == 1)).sum() / n_pos))
    return float(value), np.asarray(points)


def trapezoid_area(roc: np.ndarray) -> float:
    x, y = roc[:, 0], roc[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def segmentation_metrics(pred, gt, n_classes: int, foreground=None) -> dict:
    """Per-class DSC/SEN/PPV and their macro mean over ``foreground`` classes.

    ``foreground`` defaults to ``1..n_classes-1`` (background excluded).  A
    class absent from both maps has ``None`` entries and is left out of the
    macro mean.
    """
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    fg = list(range(1, n_classes)) if foreground is None else list(foreground)
    g_counts = np.bincount(g.ravel(), minlength=n_classes)
    p_counts = np.bincount(p.ravel(), minlength=n_classes)
    both = np.bincount(g[g == p].ravel(), minlength=n_classes)
    per_class = {}
    for c in range(n_classes):
        gi, pi, inter = int(g_counts[c]), int(p_counts[c]), int(both[c])
        per_class[c] = {"dsc": _ratio(2 * inter, gi + pi), "sen": _ratio(inter, gi), "ppv": _ratio(inter, pi)}
    macro = {}
    for key in ("dsc", "sen", "ppv"):
        vals = [per_class[c][key] for c in fg if per_class[c]["dsc"] is not None]
        vals = [v if v is not None else 0.0 for v in vals]
        macro[key] = float(np.mean(vals)) if vals else None
    return {"per_class": per_class, "macro": macro}


def margin_stats(probs, labels) -> dict:
    """Box-plot summary of ``|p - l|`` and the number of correct predictions.

    A margin below 0.5 is correct.  A margin of exactly 0.5 is counted the
    way the 0.5 threshold resolves it (``p >= 0.5`` predicts severe), so the
    count always equals TP + TN.
    """
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    m = np.abs(p - y)
    q1, med, q3 = np.percentile(m, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = m[(m >= lo_fence) & (m <= hi_fence)]
    return {"margins": m.tolist(), "q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": m[(m < lo_fence) | (m > hi_fence)].tolist(),
            "n_correct": int(((m < THRESHOLD) | ((m == THRESHOLD) & (y == 1))).sum()), "n": int(m.size)}


@dataclass
class MetricsReport:
    classification: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)
    auc: float | None = None
    roc: list = field(default_factory=list)
    margins: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = dict(self.classification)
        out["auc"] = self.auc
        for k, v in self.segmentation.items():
            out[k] = v
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(labels, probs, seg_pairs: Sequence = (), n_seg_classes: int = 6) -> MetricsReport:
    """Build a report from case-level probabilities and (pred, gt) label-map pairs.

    Segmentation scores are computed per scan, then averaged over scans.
    """
    labels = np.asarray(labels).astype(int)
    probs = np.asarray(probs, dtype=float)
    counts = confusion_counts(labels, probs)
    report = MetricsReport(classification_metrics(counts), counts=asdict(counts))
    if len(set(labels.tolist())) == 2:
        report.auc, roc = auc(probs, labels)
        report.roc = roc.tolist()
    report.margins = margin_stats(probs, labels) if len(labels) else {}
    if seg_pairs:
        per_scan = [segmentation_metrics(p, g, n_seg_classes)["macro"] for p, g in seg_pairs]
        report.segmentation = {k: float(np.mean([s[k] for s in per_scan if s[k] is not None]))
                               for k in ("dsc", "sen", "ppv")}
    return report


def aggregate_folds(reports: Sequence[dict]) -> dict:
    """Unweighted mean and population std per metric; ``None`` entries are skipped."""
    if not reports:
        raise ValueError("need at least one fold report")
    keys = sorted({k for r in reports for k in r})
    out = {}
    for k in keys:
        vals = [r[k] for r in reports if r.get(k) is not None]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


def write_report(out_dir, name: str, report: MetricsReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(report.to_dict(), indent=1))
    flat = report.flat()
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(flat):
            w.writerow([k, "" if flat[k] is None else flat[k]])
    if report.roc:
        with open(out_dir / f"{name}_roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            w.writerows(report.roc)
    if report.margins:
        with open(out_dir / f"{name}_margins.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["margin"])
            w.writerows([[m] for m in report.margins["margins"]])
