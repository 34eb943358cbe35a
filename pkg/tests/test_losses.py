import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwff import tensor as T
from dwff.losses import (
    LossBreakdown,
    LossConfig,
    dice_loss,
    focal_loss,
    l2_loss,
    one_hot,
    total_loss,
    weight_entropy_loss,
)
from dwff.metrics import ConfusionMatrix, class_metrics
from dwff.tensor import Tensor, grad_check


def random_probs(rng, b, c, h, w):
    return Tensor(T.softmax(Tensor(rng.normal(size=(b, c, h, w)) * 2), axis=1).data)


# scalar-loop oracles -------------------------------------------------------


def dice_oracle(p, y, eps):
    b, c, h, w = p.shape
    terms = []
    for k in range(c):
        inter = math.fsum(p[i, k, r, s] * (y[i, r, s] == k) for i in range(b) for r in range(h) for s in range(w))
        ps = math.fsum(p[i, k, r, s] for i in range(b) for r in range(h) for s in range(w))
        ys = sum(int(y[i, r, s] == k) for i in range(b) for r in range(h) for s in range(w))
        terms.append(1 - (2 * inter + eps) / (ps + ys + eps))
    return math.fsum(terms) / c


def focal_oracle(p, y, gamma, alpha_t):
    b, _, h, w = p.shape
    vals = []
    for i in range(b):
        for r in range(h):
            for s in range(w):
                pt = max(p[i, y[i, r, s], r, s], 1e-7)
                vals.append(-alpha_t * (1 - pt) ** gamma * math.log(pt))
    return math.fsum(vals) / len(vals)


def entropy_oracle(w):
    return math.fsum(-math.fsum(x * math.log(x) for x in row if x > 0) for row in w) / len(w)


# examples ------------------------------------------------------------------


def test_dice_perfect_prediction():
    lab = np.array([[[0, 1], [2, 1]]])
    p = Tensor(one_hot(lab, 3))
    assert dice_loss(p, lab, eps=1e-6).item() < 1e-6


def test_dice_absent_class_contributes_zero():
    lab = np.zeros((1, 2, 2), dtype=int)
    p = Tensor(one_hot(lab, 2))
    assert dice_loss(p, lab, eps=1.0).item() == 0.0


def test_dice_half_overlap():
    lab = np.array([[[0, 0, 1, 1]]])
    pred = np.array([[[0, 1, 0, 1]]])
    assert dice_loss(Tensor(one_hot(pred, 2)), lab, eps=0.0).item() == pytest.approx(0.5, abs=1e-15)


def test_focal_single_pixel():
    p = Tensor(np.array([0.5, 0.5]).reshape(1, 2, 1, 1))
    assert focal_loss(p, np.zeros((1, 1, 1), dtype=int)).item() == pytest.approx(0.043321698784996582, abs=1e-15)


def test_focal_perfect_and_ce_reduction(rng):
    lab = rng.integers(0, 4, size=(2, 3, 3))
    assert focal_loss(Tensor(one_hot(lab, 4)), lab).item() == 0.0
    p = random_probs(rng, 2, 4, 3, 3)
    ce = -np.mean(np.log(np.take_along_axis(p.data, lab[:, None], axis=1)))
    assert focal_loss(p, lab, gamma=0.0, alpha_t=1.0).item() == pytest.approx(ce, abs=1e-14)


def test_entropy_examples():
    assert weight_entropy_loss(Tensor([[0.25] * 4])).item() == pytest.approx(math.log(4), abs=1e-15)
    assert weight_entropy_loss(Tensor([[0.0, 1.0, 0.0, 0.0]])).item() == 0.0
    assert weight_entropy_loss(Tensor([[0.5, 0.25, 0.125, 0.125]])).item() == pytest.approx(1.2130075659799043, abs=1e-15)
    with pytest.raises(ValueError):
        weight_entropy_loss(Tensor([[1.5, -0.5]]))


def test_l2_examples():
    assert l2_loss([Tensor(np.zeros((2, 2)))]).item() == 0.0
    assert l2_loss([Tensor([3.0])]).item() == 9.0
    assert l2_loss([]).item() == 0.0


def test_total_composition_example():
    cfg = LossConfig(lambda1=0.04, lambda2=0.01)
    bd = LossBreakdown(dice=1.0, focal=1.0, seg=1.0, l2=2.0, entropy=math.log(4), total=0.0)
    total = cfg.alpha * bd.dice + cfg.beta * bd.focal + cfg.lambda1 * bd.l2 - cfg.lambda2 * bd.entropy
    assert total == pytest.approx(1.0661370563888011, abs=1e-15)


def test_total_breakdown_invariants(rng):
    p = random_probs(rng, 2, 15, 4, 4)
    lab = rng.integers(0, 15, size=(2, 4, 4))
    w = Tensor(T.softmax(Tensor(rng.normal(size=(2, 4))), axis=1).data)
    ws = [Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(2,)))]
    total, bd = total_loss(p, lab, w, ws)
    assert abs(bd.seg - (0.5 * bd.dice + 0.5 * bd.focal)) < 1e-12
    assert abs(bd.total - (bd.seg + 0.04 * bd.l2 - 0.01 * bd.entropy)) < 1e-12
    assert total.item() == bd.total
    _, plain = total_loss(p, lab, w, ws, LossConfig(lambda1=0.0, lambda2=0.0))
    assert plain.total == plain.seg


def test_csv_row_columns():
    row = LossBreakdown(1, 2, 3, 4, 5, 0.1 + 0.2).csv_row(7)
    assert row[:6] == ["7", "1.0", "2.0", "3.0", "4.0", "5.0"]
    assert float(row[6]) == 0.1 + 0.2


def test_rejects_unnormalized_probs():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.full((1, 2, 1, 1), 0.6)), np.zeros((1, 1, 1), dtype=int))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0, beta=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha_t=0.0)


# properties ----------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.sampled_from([0.0, 1e-3, 1.0]))
def test_losses_match_scalar_oracles(seed, eps):
    rng = np.random.default_rng(seed)
    b, c, h, w = rng.integers(1, 3), rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 4)
    p = random_probs(rng, b, c, h, w)
    lab = rng.integers(0, c, size=(b, h, w))
    if eps == 0.0:
        lab[..., 0, 0] = np.arange(b) % c
    assert abs(dice_loss(p, lab, eps=max(eps, 1e-12)).item() - dice_oracle(p.data, lab, max(eps, 1e-12))) < 1e-10
    assert abs(focal_loss(p, lab).item() - focal_oracle(p.data, lab, 2.0, 0.25)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_pixel_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 1, 4, 3, 3)
    lab = rng.integers(0, 4, size=(1, 3, 3))
    perm = rng.permutation(9)
    pp = Tensor(p.data.reshape(1, 4, 9)[:, :, perm].reshape(1, 4, 3, 3))
    lp = lab.reshape(1, 9)[:, perm].reshape(1, 3, 3)
    assert dice_loss(p, lab).item() == pytest.approx(dice_loss(pp, lp).item(), abs=1e-14)
    assert focal_loss(p, lab).item() == pytest.approx(focal_loss(pp, lp).item(), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 2, 5, 3, 3)
    lab = rng.integers(0, 5, size=(2, 3, 3))
    w = T.softmax(Tensor(rng.normal(size=(3, 4)) * 3), axis=1)
    assert 0.0 <= dice_loss(p, lab).item() <= 1.0
    assert focal_loss(p, lab).item() >= 0.0
    assert 0.0 <= weight_entropy_loss(w).item() <= math.log(4) + 1e-12
    assert abs(weight_entropy_loss(w).item() - entropy_oracle(w.data)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sharpening_weights_raises_total(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 1, 3, 2, 2)
    lab = rng.integers(0, 3, size=(1, 2, 2))
    scores = rng.normal(size=(1, 4))
    soft = T.softmax(Tensor(scores), axis=1)
    sharp = T.softmax(Tensor(scores * 3.0), axis=1)
    if len(set(np.round(scores[0], 6))) < 4:
        return
    a = total_loss(p, lab, soft, [])[1].total
    b = total_loss(p, lab, sharp, [])[1].total
    assert b > a


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dice_relates_to_iou(seed):
    rng = np.random.default_rng(seed)
    c = 4
    pred = rng.integers(0, c, size=(1, 5, 5))
    lab = rng.integers(0, c, size=(1, 5, 5))
    cm = ConfusionMatrix(c).accumulate(pred, lab)
    y, q = one_hot(lab, c), one_hot(pred, c)
    for k in range(c):
        inter = float((y[:, k] * q[:, k]).sum())
        denom = float(y[:, k].sum() + q[:, k].sum())
        if denom == 0:
            continue
        dice_k = 2 * inter / denom
        iou = class_metrics(cm, k)[3]
        assert abs(dice_k - 2 * iou / (1 + iou)) < 1e-9


def test_total_gradient_matches_central_differences(rng):
    logits = Tensor(rng.normal(size=(2, 4, 2, 2)), requires_grad=True)
    scores = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    wmat = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    lab = rng.integers(0, 4, size=(2, 2, 2))

    def f():
        return total_loss(T.softmax(logits, axis=1), lab, T.softmax(scores, axis=1), [wmat])[0]

    assert grad_check(f, [logits, scores, wmat]) < 1e-4
