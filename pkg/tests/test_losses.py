import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2mil.losses import LossConfig, mil_loss, seg_loss, total_loss
from m2mil.tensor import Tensor, gradcheck


def test_mil_loss_uniform_logits_is_ln2():
    for y in (0, 1):
        assert mil_loss(Tensor(np.zeros(2)), y).item() == pytest.approx(math.log(2))


def test_mil_loss_hand_value():
    # -ln(e / (e + e^-1)) = ln(1 + e^-2)
    assert mil_loss(Tensor(np.array([1.0, -1.0])), 0).item() == pytest.approx(0.12692801104297263, abs=1e-12)


def test_mil_loss_limit_and_invalid_label():
    assert mil_loss(Tensor(np.array([40.0, -40.0])), 0).item() < 1e-30
    with pytest.raises(ValueError):
        mil_loss(Tensor(np.zeros(2)), 2)
    with pytest.raises(ValueError):
        mil_loss(Tensor(np.zeros(2)), 0.5)


def test_seg_loss_toy_dice_value():
    # two classes, 2x2 patch; class-1 probability 0.9, 0.9, 0.1, 0.1 against mask 1, 1, 0, 0
    p1 = np.array([0.9, 0.9, 0.1, 0.1])
    logits = np.stack([np.zeros(4), np.log(p1 / (1 - p1))]).reshape(1, 2, 2, 2)
    mask = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    eps = 1e-6
    ce = -sum(math.log(0.9) for _ in range(4)) / 4
    dice1 = 1 - (2 * 1.8 + eps) / (2.0 + 2 + eps)
    dice0 = 1 - (2 * 1.8 + eps) / (2.0 + 2 + eps)
    assert dice1 == pytest.approx(0.1, abs=1e-6)
    got = seg_loss(Tensor(logits), [mask], eps).item()
    assert got == pytest.approx(ce + dice0 + dice1, abs=1e-12)


def test_seg_loss_perfect_prediction_is_zero():
    rng = np.random.default_rng(0)
    masks = [rng.integers(0, 6, (8, 8)).astype(np.uint8) for _ in range(3)]
    logits = np.stack([(m[None] == np.arange(6)[:, None, None]) * 200.0 for m in masks])
    assert seg_loss(Tensor(logits), masks).item() < 1e-6


def test_seg_loss_disjoint_class_contributes_one():
    mask = np.zeros((4, 4), dtype=np.uint8)
    logits = np.zeros((1, 2, 4, 4))
    logits[0, 1] = 200.0  # every pixel confidently class 1, mask says class 0
    loss = seg_loss(Tensor(logits), [mask]).item()
    # CE is 200 per pixel; both Dice terms are 1 (no overlap)
    assert loss == pytest.approx(200.0 + 2.0, rel=1e-9)


def test_seg_loss_without_masks_is_exact_zero():
    logits = Tensor(np.random.default_rng(1).standard_normal((3, 4, 2, 2)), requires_grad=True)
    out = seg_loss(logits, [None, None, None])
    assert out.item() == 0.0 and not out.requires_grad


def test_mask_less_patches_receive_no_gradient():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((3, 3, 4, 4)), requires_grad=True)
    masks = [rng.integers(0, 3, (4, 4)).astype(np.uint8), None, None]
    seg_loss(logits, masks).backward()
    assert np.all(logits.grad[1:] == 0) and np.any(logits.grad[0] != 0)


def test_seg_loss_averages_over_masked_patches_only():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((2, 3, 4, 4))
    m = rng.integers(0, 3, (4, 4)).astype(np.uint8)
    alone = seg_loss(Tensor(logits[:1]), [m]).item()
    assert seg_loss(Tensor(logits), [m, None]).item() == pytest.approx(alone, abs=1e-14)


def test_seg_loss_rejects_bad_masks():
    with pytest.raises(ValueError):
        seg_loss(Tensor(np.zeros((1, 3, 4, 4))), [np.full((4, 4), 3, dtype=np.uint8)])
    with pytest.raises(ValueError):
        seg_loss(Tensor(np.zeros((1, 3, 4, 4))), [np.zeros((2, 2), dtype=np.uint8)])


def test_loss_gradients():
    rng = np.random.default_rng(4)
    masks = [rng.integers(0, 4, (3, 3)).astype(np.uint8), None]
    assert gradcheck(lambda t: seg_loss(t, masks), rng.standard_normal((2, 4, 3, 3))).passed
    assert gradcheck(lambda t: mil_loss(t, 1), rng.standard_normal(2)).passed


def test_total_loss_examples():
    assert total_loss(Tensor(0.5), Tensor(0.3), LossConfig(lam=0.01)).item() == pytest.approx(0.305)
    assert total_loss(Tensor(0.5), Tensor(0.3), 0.0).item() == pytest.approx(0.3)
    assert total_loss(Tensor(0.5), Tensor(0.0), 0.01).item() == 0.5 * 0.01
    with pytest.raises(ValueError):
        LossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        total_loss(Tensor(0.5), Tensor(0.3), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_linear_in_lambda(a, b, mil, seg):
    f = lambda lam: total_loss(Tensor(mil), Tensor(seg), lam).item()  # noqa: E731
    assert f(a + b) - f(0.0) == pytest.approx((f(a) - f(0.0)) + (f(b) - f(0.0)), abs=1e-9)
