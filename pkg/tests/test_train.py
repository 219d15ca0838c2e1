import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from efnet import tensor as T
from efnet.data import IGNORE, gen_synthetic
from efnet.errors import ContractError, TrainingDivergence
from efnet.mfad import SegPrediction
from efnet.model import ModelConfig, build_model
from efnet.tensor import Tensor
from efnet.train import AdamW, SGD, TrainConfig, cross_entropy, eval_miou, report_from_confusion, train_toy

TINY = ModelConfig(channels=(8, 8, 8, 8), heads=(1, 1, 1, 1), num_classes=3, height=16, width=16, window=4)


def test_cross_entropy_examples():
    p = Tensor(np.full((2, 3, 3), 0.5))
    assert cross_entropy(p, np.zeros((3, 3), int)).item() == pytest.approx(math.log(2))
    onehot = np.zeros((2, 2, 2))
    onehot[1] = 1.0
    assert cross_entropy(Tensor(onehot), np.ones((2, 2), int)).item() == pytest.approx(0.0, abs=1e-12)
    # clamped rather than infinite when the true class has probability 0
    assert cross_entropy(Tensor(onehot), np.zeros((2, 2), int)).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ContractError):
        cross_entropy(p, np.full((3, 3), IGNORE))


def test_cross_entropy_scalar_loop(rng):
    logits = rng.standard_normal((4, 3, 5))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0)
    labels = rng.integers(0, 4, (3, 5))
    labels[0, :2] = IGNORE
    total, n = 0.0, 0
    for y in range(3):
        for x in range(5):
            if labels[y, x] != IGNORE:
                total -= math.log(probs[labels[y, x], y, x])
                n += 1
    assert cross_entropy(SegPrediction(Tensor(probs)), labels).item() == pytest.approx(total / n, abs=1e-6)


def test_miou_examples():
    truth = np.zeros((2, 4), int)
    truth[1] = 1
    rep = eval_miou([np.zeros((2, 4), int)], [truth], 2)
    np.testing.assert_allclose(rep.iou, [0.5, 0.0])
    assert rep.miou == pytest.approx(0.25)
    assert eval_miou([truth], [truth], 2).miou == 1.0


def test_miou_counting_oracle(rng):
    pred, truth = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
    truth[0, 0] = IGNORE
    rep = eval_miou([pred], [truth], 4)
    ious = []
    for c in range(4):
        tp = fp = fn = 0
        for y in range(8):
            for x in range(8):
                if truth[y, x] == IGNORE:
                    continue
                tp += pred[y, x] == c and truth[y, x] == c
                fp += pred[y, x] == c and truth[y, x] != c
                fn += pred[y, x] != c and truth[y, x] == c
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    assert math.isnan(rep.iou[3])
    assert rep.miou == pytest.approx(np.mean(ious))


@given(st.integers(0, 9999))
def test_miou_permutation_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 3, (4, 4)) for _ in range(4)]
    labels = [rng.integers(0, 3, (4, 4)) for _ in range(4)]
    a = eval_miou(preds, labels, 3)
    perm = rng.permutation(4)
    b = eval_miou([preds[i] for i in perm], [labels[i] for i in perm], 3)
    assert a.miou == b.miou and np.array_equal(a.confusion, b.confusion)
    finite = a.iou[~np.isnan(a.iou)]
    assert np.all((finite >= 0) & (finite <= 1))


def test_miou_rejects_bad_labels():
    with pytest.raises(ContractError):
        eval_miou([np.zeros((2, 2), int)], [np.full((2, 2), 5)], 3)


def test_report_summary_format():
    rep = report_from_confusion(np.array([[3, 1], [0, 0]]))
    assert "mIoU" in rep.summary() and rep.acc[0] == 0.75


def test_adamw_hand_calculation():
    theta = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"t": theta}, lr=0.1, weight_decay=0.01)
    theta.grad = np.array([1.0])
    opt.step()
    # m = 0.1, v = 0.001; bias-corrected both are 1 -> step lr * (1/(1+eps) + wd*theta)
    assert theta.data[0] == pytest.approx(2.0 - 0.1 * (1 / (1 + 1e-8) + 0.01 * 2.0), abs=1e-12)
    assert opt.m["t"][0] == pytest.approx(0.1) and opt.v["t"][0] == pytest.approx(0.001)


def test_sgd_step():
    theta = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    theta.grad = np.array([0.5, 0.5])
    SGD({"t": theta}, lr=0.1).step()
    np.testing.assert_allclose(theta.data, [0.95, -1.05])


def test_lr_zero_leaves_parameters():
    data = gen_synthetic(6, 16, 16, 3, seed=0)
    m = build_model(TINY)
    before = {k: v.data.copy() for k, v in m.params.items()}
    rep = train_toy(m, (data[:4], data[4:]), TrainConfig(steps=3, batch_size=4, lr=0.0, weight_decay=0.0))
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)
    assert len(rep.loss_curve) == 3 and max(rep.loss_curve) - min(rep.loss_curve) < 1e-6


def test_training_is_deterministic_and_learns():
    data = gen_synthetic(12, 16, 16, 3, seed=0)
    tc = TrainConfig(steps=30, batch_size=2, lr=2e-3, seed=1)
    a = train_toy(build_model(TINY.replace(decoder="mlp")), (data[:10], data[10:]), tc)
    b = train_toy(build_model(TINY.replace(decoder="mlp")), (data[:10], data[10:]), tc)
    assert a.loss_curve == b.loss_curve and a.miou == b.miou
    assert np.mean(a.loss_curve[-5:]) < np.mean(a.loss_curve[:5])


def test_divergence_names_step():
    data = gen_synthetic(2, 16, 16, 3, seed=0)
    m = build_model(TINY)
    m.params["stage1.norm.g"].data[:] = np.nan
    with pytest.raises(TrainingDivergence, match="step 0"):
        train_toy(m, (data, []), TrainConfig(steps=2))
