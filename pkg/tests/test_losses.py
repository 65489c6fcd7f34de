import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from alc import losses as L


def probs_hwc(rows, h, w):
    """Build a (C, H, W) tensor from per-pixel class vectors listed row-major."""
    a = torch.tensor(rows, dtype=torch.float64).reshape(h, w, -1)
    return a.permute(2, 0, 1)


def test_ce_one_hot_correct():
    lab = torch.tensor([[0, 1], [1, 0]])
    p = L.one_hot(lab, 2, torch.float64)
    assert float(L.cross_entropy(p, lab)) <= 1e-6


def test_ce_uniform_binary_is_ln2():
    p = torch.full((2, 4, 4), 0.5, dtype=torch.float64)
    lab = torch.zeros(4, 4, dtype=torch.long)
    assert float(L.cross_entropy(p, lab)) == pytest.approx(math.log(2), abs=1e-12)


def test_ce_zero_prob_is_clamped():
    lab = torch.ones(2, 2, dtype=torch.long)
    p = L.one_hot(torch.zeros(2, 2, dtype=torch.long), 2, torch.float64)
    v = float(L.cross_entropy(p, lab))
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(L.CE_EPS))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        L.cross_entropy(torch.zeros(2, 3, 3), torch.zeros(4, 4, dtype=torch.long))
    with pytest.raises(ValueError):
        L.soft_dice_loss(torch.zeros(2, 3, 3), torch.zeros(4, 4, dtype=torch.long))


def test_soft_dice_perfect():
    lab = torch.tensor([[0, 1], [1, 1]])
    assert float(L.soft_dice_loss(L.one_hot(lab, 2, torch.float64), lab)) == pytest.approx(0, abs=1e-4)


def test_soft_dice_disjoint_foreground_term():
    lab = torch.tensor([[0, 0], [1, 1]])
    p = L.one_hot(1 - lab, 2, torch.float64)
    # both class terms are fully disjoint here
    assert float(L.soft_dice_loss(p, lab)) == pytest.approx(1.0, abs=1e-4)


def test_soft_dice_hand_case():
    p = probs_hwc([[0.8, 0.2], [0.6, 0.4], [0.3, 0.7], [0.1, 0.9]], 2, 2)
    lab = torch.tensor([[0, 0], [1, 1]])
    assert float(L.soft_dice_loss(p, lab)) == pytest.approx(0.25062593671052613, abs=1e-12)


def test_seg_loss_is_mean_of_halves():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(3, 5, 5)))
    p = torch.softmax(logits, 0)
    lab = torch.tensor(rng.integers(0, 3, size=(5, 5)))
    ce = float(L.cross_entropy(p, lab))
    dl = float(L.soft_dice_loss(p, lab))
    assert float(L.seg_loss(p, lab)) == pytest.approx((ce + dl) / 2, abs=1e-14)
    assert float(L.seg_loss(L.one_hot(lab, 3, torch.float64), lab)) == pytest.approx(0, abs=1e-4)


def test_seg_loss_uniform_empty_foreground():
    p = torch.full((2, 2, 2), 0.5, dtype=torch.float64)
    lab = torch.zeros(2, 2, dtype=torch.long)
    assert float(L.seg_loss(p, lab)) == pytest.approx(0.6799055347308985, abs=1e-12)


def _two_samples():
    rng = np.random.default_rng(1)
    p = torch.softmax(torch.tensor(rng.normal(size=(2, 2, 4, 4))), 1)
    lab = torch.tensor(rng.integers(0, 2, size=(2, 4, 4)))
    return p, lab


@pytest.mark.parametrize("fn", [L.hq_loss, L.lq_loss, L.noisy_loss])
def test_batch_mean_contract(fn):
    p, lab = _two_samples()
    single = float(L.seg_loss(p[0], lab[0]))
    assert float(fn(p[:1], lab[:1])) == pytest.approx(single, abs=1e-14)
    both = (single + float(L.seg_loss(p[1], lab[1]))) / 2
    assert float(fn(p, lab)) == pytest.approx(both, abs=1e-14)
    dup = float(fn(torch.cat([p, p]), torch.cat([lab, lab])))
    assert dup == pytest.approx(both, abs=1e-14)


def test_hq_loss_empty_batch():
    with pytest.raises(L.EmptyBatchError):
        L.hq_loss(torch.zeros(0, 2, 4, 4), torch.zeros(0, 4, 4, dtype=torch.long))


def test_lq_and_noisy_empty_are_zero():
    empty = torch.zeros(0, 2, 4, 4)
    lab = torch.zeros(0, 4, 4, dtype=torch.long)
    assert float(L.lq_loss(empty, lab)) == 0.0
    assert float(L.noisy_loss(empty, lab)) == 0.0


def test_consistency_cases():
    stack = torch.rand(4, 2, 3, 3, dtype=torch.float64)
    assert float(L.consistency_loss(stack, stack.mean(0))) == 0.0
    teacher = torch.tensor([0.0, 1.0], dtype=torch.float64).reshape(1, 2, 1, 1).repeat(3, 1, 1, 1)
    student = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(2, 1, 1)
    assert float(L.consistency_loss(teacher, student)) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_consistency_homogeneous():
    rng = np.random.default_rng(3)
    stack = torch.tensor(rng.random((3, 2, 4, 4)))
    student = torch.tensor(rng.random((2, 4, 4)))
    mean = stack.mean(0)
    doubled = mean + 2 * (student - mean)
    a = float(L.consistency_loss(stack, student))
    b = float(L.consistency_loss(stack, doubled))
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        L.consistency_loss(torch.zeros(3, 2, 4, 4), torch.zeros(2, 5, 5))


def test_lambda_ramp_values():
    assert L.lambda_ramp(100, 100) == 1.0
    assert L.lambda_ramp(500, 100) == 1.0
    assert L.lambda_ramp(0, 100) == pytest.approx(0.006737946999085467, abs=1e-15)
    assert L.lambda_ramp(50, 100) == pytest.approx(0.2865047968601901, abs=1e-15)


@settings(max_examples=100)
@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(1, 500))
def test_lambda_ramp_monotone(t1, t2, horizon):
    lo, hi = sorted((t1, t2))
    assert L.lambda_ramp(lo, horizon) <= L.lambda_ramp(hi, horizon)
    assert 0 < L.lambda_ramp(lo, horizon) <= 1


def test_total_loss_examples():
    assert L.total_loss(1.5, 2.0, 3.0, 4.0, L.LossSpec(3, 2, 0.0)) == 1.5
    assert L.total_loss(1, 1, 1, 1, L.LossSpec(3, 2, 1.0)) == 7.0
    no_ls = L.LossSpec(3, 2, 0.7, frozenset({"hs", "n", "c"}))
    assert L.total_loss(1, 5, 1, 1, no_ls) == L.total_loss(1, 0, 1, 1, L.LossSpec(3, 2, 0.7))


def test_total_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        L.total_loss(1.0, float("nan"), 0.0, 0.0, L.LossSpec())


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 5), st.floats(0, 5),
       st.floats(0, 1), st.integers(0, 3), st.floats(0.1, 3))
def test_total_loss_linear_per_component(vals, alpha, beta, lam, axis, delta):
    spec = L.LossSpec(alpha, beta, lam)
    coef = [1.0, lam * alpha, lam * beta, lam][axis]
    a = L.total_loss(*vals, spec)
    bumped = list(vals)
    bumped[axis] += delta
    b = L.total_loss(*bumped, spec)
    assert b - a == pytest.approx(coef * delta, rel=1e-9, abs=1e-9)


def test_losses_nonnegative_random():
    rng = np.random.default_rng(9)
    for _ in range(50):
        c = int(rng.integers(2, 5))
        p = torch.softmax(torch.tensor(rng.normal(size=(c, 6, 6)) * 3), 0)
        lab = torch.tensor(rng.integers(0, c, size=(6, 6)))
        for v in (L.cross_entropy(p, lab), L.soft_dice_loss(p, lab), L.seg_loss(p, lab)):
            assert math.isfinite(float(v)) and float(v) >= 0
