"""One test per acceptance criterion; each records a PASS/FAIL line.

The end-to-end criterion runs the desk profile live through the CLI (about
20 minutes on a laptop CPU).  Set ``M2MIL_E2E_OUT`` to keep its outputs.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from test_gcp import brute_force_gcp

from m2mil.backbone import DECODER_BLOCKS, DESK_ARCH, TABLE_I_ARCH
from m2mil.cli import EXIT_OK, main
from m2mil.gcp import gcp_forward
from m2mil.gradsuite import run_suite
from m2mil.losses import LossConfig, mil_loss, seg_loss, total_loss
from m2mil.metrics import (ConfusionCounts, auc, classification_metrics, confusion_counts, margin_stats,
                           segmentation_metrics, trapezoid_area)
from m2mil.network import M2UNetNet
from m2mil.tensor import Tensor

# published per-block parameter counts of the full-size network
TABLE_COUNTS = {
    "Encoding block 1": 37e3, "Encoding block 2": 72e3, "Encoding block 3": 72e3, "Encoding block 4": 72e3,
    "Encoding block 5": 2595e3, "Embedding-Level MIL": 193e3, "Image-Level MIL": 48e3, "Classifier": 0.3e3,
    "Decoding block 5": 397e3, "Decoding block 4": 145e3, "Decoding block 3": 145e3, "Decoding block 2": 145e3,
    "Decoding block 1": 0.5e3,
}
E2E_BUDGET_S = 30 * 60


def test_c1_parameter_counts(verdict):
    counts = M2UNetNet(TABLE_I_ARCH).block_counts()
    off = {blk: counts[blk] / ref - 1 for blk, ref in TABLE_COUNTS.items()}
    bad = {blk: f"{counts[blk]} vs {TABLE_COUNTS[blk]:.0f} ({rel:+.1%})" for blk, rel in off.items() if abs(rel) > 0.10}
    worst = max(off, key=lambda b: abs(off[b]))
    detail = f"worst {worst} {off[worst]:+.1%}" + (f"; over 10%: {bad}" if bad else "")
    assert verdict("C1", not bad, detail), detail


def test_c2_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(n_points=20)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed and r.n_points >= 20 for r in results) and worst <= 1e-4 and elapsed < 120
    detail = f"{len(results)} components x 20 points, worst rel err {worst:.2e}, {elapsed:.1f}s"
    assert verdict("C2", ok, detail), [r for r in results if not r.passed]


def test_c3_gcp_oracle_exhaustive(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = perm_breaks = superset_breaks = 0
    for k in range(1, 9):
        for p in range(1, 9):
            for d in range(1, 9):
                for _ in range(100):
                    inst, conc = rng.standard_normal((k, d)), rng.standard_normal((p, d))
                    got = gcp_forward(Tensor(inst), Tensor(conc)).data
                    mismatches += not np.array_equal(got, brute_force_gcp(inst, conc))
                    perm_breaks += not np.array_equal(
                        gcp_forward(Tensor(inst[rng.permutation(k)]), Tensor(conc)).data, got)
                    extra = np.concatenate([inst, rng.standard_normal((int(rng.integers(1, 4)), d))])
                    superset_breaks += bool(np.any(gcp_forward(Tensor(extra), Tensor(conc)).data < got))
    elapsed = time.perf_counter() - t0
    ok = mismatches == perm_breaks == superset_breaks == 0 and elapsed < 60
    detail = (f"51200 draws: {mismatches} oracle mismatches, {perm_breaks} permutation breaks, "
              f"{superset_breaks} superset breaks, {elapsed:.1f}s")
    assert verdict("C3", ok, detail), detail


def test_c4_bag_invariance(verdict):
    net = M2UNetNet(DESK_ARCH, seed=0)
    rng = np.random.default_rng(4)
    broken = 0
    for _ in range(50):
        n = int(rng.integers(1, 33))
        bag = rng.uniform(0, 255, (n, 32, 32))
        logits, prob = net.predict_bag(bag)
        for variant in (bag[rng.permutation(n)], np.concatenate([bag, bag[rng.integers(0, n, 5)]])):
            l2, p2 = net.predict_bag(variant)
            broken += not (np.array_equal(l2, logits) and p2 == prob)
    assert verdict("C4", broken == 0, f"50 bags, {broken} of 100 permuted/duplicated variants changed"), broken


def test_c5_loss_identities(verdict):
    rng = np.random.default_rng(5)
    # linear in lambda
    lin_err = 0.0
    for _ in range(200):
        mil, seg = Tensor(rng.uniform(0, 5)), Tensor(rng.uniform(0, 5))
        a, b = rng.uniform(0, 10, 2)
        vals = [total_loss(mil, seg, LossConfig(lam=lam)).item() for lam in (a + b, a, b, 0.0)]
        lin_err = max(lin_err, abs(vals[0] - vals[1] - vals[2] + vals[3]))
    # a mask-less batch leaves every decoder parameter without gradient
    net = M2UNetNet(DESK_ARCH, seed=1)
    net.params.zero_grad()
    enc = net.encode(rng.uniform(0, 255, (4, 32, 32)), training=True)
    logits, _ = net.classify(enc)
    ls = seg_loss(net.segment_logits(enc, training=True), [None] * 4)
    total_loss(mil_loss(logits, 1), ls, LossConfig(lam=0.01)).backward()
    dec_grad = max(float(np.abs(net.params[n].grad).max()) if net.params[n].grad is not None else 0.0
                   for n in net.params if n.startswith(DECODER_BLOCKS))
    enc_grad = max(float(np.abs(net.params[n].grad).max()) for n in net.params if n.startswith("enc"))
    # confident correct logits
    masks = [rng.integers(0, 6, (16, 16)).astype(np.uint8) for _ in range(4)]
    perfect = np.stack([(m[None] == np.arange(6)[:, None, None]) * 200.0 for m in masks])
    perfect_loss = seg_loss(Tensor(perfect), masks).item()
    ok = lin_err < 1e-9 and dec_grad == 0.0 and enc_grad > 0 and perfect_loss < 1e-6
    detail = (f"lambda-linearity err {lin_err:.1e}, decoder grad {dec_grad} on mask-less bag, "
              f"perfect seg_loss {perfect_loss:.1e}")
    assert verdict("C5", ok, detail), detail


# -- end to end


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = Path(os.environ["M2MIL_E2E_OUT"]) if os.environ.get("M2MIL_E2E_OUT") else tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    assert main(["gen", "--out", str(root / "data"), "--cases", "120", "--seed", "0", "--tau", "0.15",
                 "--force"]) == EXIT_OK
    t_gen = time.perf_counter() - t0
    runs, times = {}, {}
    for name, extra in (("multi", []), ("seg", ["--lambda", "0"])):
        t1 = time.perf_counter()
        out = root / name
        assert main(["train", "--data", str(root / "data"), "--out", str(out), "--profile", "desk",
                     "--seed", "0"] + extra) == EXIT_OK
        times[name] = time.perf_counter() - t1
        runs[name] = out
    return {"runs": runs, "times": times, "gen": t_gen, "total": time.perf_counter() - t0}


def _aggregate(run: Path) -> dict:
    return json.loads((run / "summary.json").read_text())["aggregate"]


def test_c6a_accuracy(e2e, verdict):
    acc = _aggregate(e2e["runs"]["multi"])["accuracy"]["mean"]
    assert verdict("C6a", acc >= 0.90, f"5-fold accuracy {acc:.3f} (target 0.90)"), acc


def test_c6b_dsc(e2e, verdict):
    dsc = _aggregate(e2e["runs"]["multi"])["dsc"]["mean"]
    assert verdict("C6b", dsc >= 0.80, f"5-fold macro DSC {dsc:.3f} (target 0.80)"), dsc


def test_c6c_multitask_vs_seg_only(e2e, verdict):
    multi = _aggregate(e2e["runs"]["multi"])["dsc"]["mean"]
    seg = _aggregate(e2e["runs"]["seg"])["dsc"]["mean"]
    assert verdict("C6c", multi >= seg - 0.02, f"multi-task DSC {multi:.3f} vs seg-only {seg:.3f}"), (multi, seg)


def test_c6d_runtime(e2e, verdict):
    t = e2e["times"]
    detail = (f"gen {e2e['gen']:.0f}s + multi-task CV {t['multi']:.0f}s + seg-only CV {t['seg']:.0f}s "
              f"= {e2e['total']:.0f}s (budget {E2E_BUDGET_S}s)")
    assert verdict("C6d", e2e["total"] <= E2E_BUDGET_S, detail), detail


def test_c7_metric_identities(e2e, verdict):
    rng = np.random.default_rng(7)
    broken = []
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        p = np.round(rng.uniform(0, 1, n), 1)
        c = confusion_counts(y, p)
        m = classification_metrics(c)
        if m["accuracy"] != (c.tp + c.tn) / n:
            broken.append("accuracy")
        if m["f1"] is not None and not np.isclose(1 / m["f1"], (1 / m["precision"] + 1 / m["recall"]) / 2):
            broken.append("f1")
        value, roc = auc(p, y)
        if not np.isclose(value, trapezoid_area(roc), atol=1e-12):
            broken.append("auc")
        if margin_stats(p, y)["n_correct"] != c.tp + c.tn:
            broken.append("margin")
        g = rng.integers(0, 6, (6, 6))
        if segmentation_metrics(g, g, 6)["macro"]["dsc"] != 1.0:
            broken.append("dsc")
    # hand-evaluated examples, compared exactly
    if classification_metrics(ConfusionCounts(tp=3, tn=5, fp=1, fn=1)) != {
            "accuracy": 0.8, "precision": 0.75, "recall": 0.75, "f1": 0.75}:
        broken.append("counts example")
    if set(classification_metrics(ConfusionCounts(5, 5, 0, 0)).values()) != {1.0}:
        broken.append("perfect")
    if auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])[0] != 0.75 or auc([0.3] * 4, [1, 0, 1, 0])[0] != 0.5:
        broken.append("auc example")
    gt = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0])
    pr = np.array([1, 1, 1, 0, 1, 1, 1, 0, 0])
    seg = segmentation_metrics(pr, gt, 2)["per_class"][1]
    if (seg["dsc"], seg["sen"], seg["ppv"]) != (0.6, 0.75, 0.5):
        broken.append("segmentation example")
    # every evaluation written by the end-to-end run
    n_reports = 0
    for fold_report in sorted(e2e["runs"]["multi"].glob("fold*/test_report.json")):
        rep = json.loads(fold_report.read_text())
        n_reports += 1
        if rep["margins"]["n_correct"] != rep["counts"]["tp"] + rep["counts"]["tn"]:
            broken.append(str(fold_report))
        if rep["margins"]["n_correct"] / rep["margins"]["n"] != rep["classification"]["accuracy"]:
            broken.append(str(fold_report))
    ok = not broken and n_reports == 5
    detail = f"hand examples, 200 random draws and {n_reports} fold evaluations: {len(broken)} breaks"
    assert verdict("C7", ok, detail), broken


def test_c8_bitwise_reproducible_training(tmp_path, verdict):
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--cases", "15", "--seed", "8", "--mask-fraction", "0.5"]) == EXIT_OK
    flags = ["--profile", "desk", "--epochs", "2", "--bag-size", "4", "--folds", "0", "--seed", "8"]
    for name in ("a", "b"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / name)] + flags) == EXIT_OK
    # wall-clock timing is the only file expected to differ
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "timing.json")
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    has_core = {"fold0/model.ckpt", "fold0/train_log.jsonl"} <= {str(f) for f in files}
    ok = has_core and not differ
    assert verdict("C8", ok, f"{len(files)} output files compared, {len(differ)} differ"), differ
