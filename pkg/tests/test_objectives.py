import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from posref.objectives import (
    LossBreakdown, dice_ce_loss, dice_metric, iou, itcl_loss, miou_metric,
    pseudo_label, total_loss,
)


def logit(p):
    return math.log(p / (1 - p))


class TestDiceCE:
    def test_hand_case(self):
        # p = 0.5 everywhere on 2x2, one positive pixel:
        # dice = 1 - (2*0.5 + 1)/(2 + 1 + 1) = 0.5 ; bce = ln 2
        logits = torch.zeros(2, 2, dtype=torch.float64)
        target = torch.zeros(2, 2, dtype=torch.float64)
        target[0, 0] = 1.0
        loss = dice_ce_loss(logits, target).item()
        assert loss == pytest.approx(0.5 + math.log(2), abs=1e-12)

    def test_perfect_prediction_limit(self):
        target = (torch.rand(224, 224, dtype=torch.float64) > 0.5).double()
        logits = (target * 2 - 1) * 40.0  # saturates past the clamp
        assert dice_ce_loss(logits, target).item() <= 1e-5

    def test_empty_target_tiny_probs(self):
        target = torch.zeros(16, 16, dtype=torch.float64)
        logits = torch.full((16, 16), -40.0, dtype=torch.float64)
        p = 1e-7  # clamp floor
        expected_dice = 1.0 - 1.0 / (16 * 16 * p + 1.0)
        loss = dice_ce_loss(logits, target).item()
        assert loss == pytest.approx(expected_dice - math.log(1 - p), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_ce_loss(torch.zeros(2, 2), torch.zeros(3, 3))

    def test_gradient_vs_finite_differences(self):
        rng = torch.Generator().manual_seed(0)
        logits = torch.randn(6, 6, generator=rng, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(6, 6, generator=rng, dtype=torch.float64) > 0.5).double()
        loss = dice_ce_loss(logits, target)
        loss.backward()
        h = 1e-4
        for idx in [(0, 0), (2, 3), (5, 5)]:
            e = torch.zeros_like(logits)
            e[idx] = h
            fd = (dice_ce_loss(logits.detach() + e, target)
                  - dice_ce_loss(logits.detach() - e, target)).item() / (2 * h)
            assert fd == pytest.approx(logits.grad[idx].item(), rel=1e-4)


class TestPseudoLabel:
    @pytest.mark.parametrize("p,delta,expected", [(0.95, 0.9, 1.0), (0.9, 0.9, 1.0),
                                                  (0.2, 0.9, 0.0)])
    def test_threshold(self, p, delta, expected):
        assert pseudo_label(np.array([[p]]), delta)[0, 0] == expected

    @given(st.integers(0, 100))
    @settings(max_examples=20, deadline=None)
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((8, 8))
        p2 = np.clip(p + rng.random((8, 8)) * 0.2, 0, 1)
        y, y2 = pseudo_label(p, 0.7), pseudo_label(p2, 0.7)
        assert np.all(y2 >= y)


def infonce_oracle(v, u, tau):
    """Plain symmetric InfoNCE, written independently of itcl_loss."""
    s = (v @ u.T / tau).double()
    b = s.shape[0]
    loss = 0.0
    for i in range(b):
        loss -= torch.log(torch.exp(s[i, i]) / torch.exp(s[i, :]).sum())
        loss -= torch.log(torch.exp(s[i, i]) / torch.exp(s[:, i]).sum())
    return loss / (2 * b)


def random_unit(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, d, generator=g, dtype=torch.float64)
    return x / x.norm(dim=-1, keepdim=True)


class TestItcl:
    def test_b1_is_zero(self):
        v = random_unit(1, 4, 0)
        assert itcl_loss(v, v, np.ones((1, 1)), 0.07).item() == 0.0

    def test_b2_hand_case(self):
        v = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = itcl_loss(v, v, np.eye(2), 1.0).item()
        expected = -math.log(math.e / (math.e + 1.0))
        assert loss == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("b", [2, 4, 8])
    def test_identity_affinity_equals_infonce(self, b):
        v, u = random_unit(b, 8, b), random_unit(b, 8, b + 100)
        ours = itcl_loss(v, u, np.eye(b), 0.07).item()
        oracle = infonce_oracle(v, u, 0.07).item()
        assert ours == pytest.approx(oracle, abs=1e-10)

    def test_permutation_invariance(self):
        b = 5
        v, u = random_unit(b, 8, 1), random_unit(b, 8, 2)
        labels = [np.random.default_rng(i).integers(0, 2, 6) for i in range(b)]
        from posref.postext import affinity_matrix
        a = affinity_matrix(labels)
        perm = [3, 0, 4, 1, 2]
        before = itcl_loss(v, u, a, 0.07).item()
        after = itcl_loss(v[perm], u[perm], a[np.ix_(perm, perm)], 0.07).item()
        assert after == pytest.approx(before, abs=1e-12)

    def test_nonneg_with_identity(self):
        v, u = random_unit(6, 8, 9), random_unit(6, 8, 10)
        assert itcl_loss(v, u, np.eye(6), 0.07).item() >= 0.0

    def test_nonfinite_rejected(self):
        v = random_unit(2, 4, 0)
        bad = v.clone()
        bad[0, 0] = float("nan")
        with pytest.raises(ValueError):
            itcl_loss(bad, v, np.eye(2), 0.07)

    def test_gradient_vs_finite_differences(self):
        b, d, tau = 4, 8, 0.07
        v = random_unit(b, d, 5).requires_grad_(True)
        u = random_unit(b, d, 6)
        a = np.abs(np.random.default_rng(0).random((b, b)))
        np.fill_diagonal(a, 1.0)
        a = (a + a.T) / 2
        itcl_loss(v, u, a, tau).backward()
        h = 1e-4
        for idx in [(0, 0), (1, 3), (3, 7)]:
            e = torch.zeros_like(v)
            e[idx] = h
            fd = (itcl_loss(v.detach() + e, u, a, tau)
                  - itcl_loss(v.detach() - e, u, a, tau)).item() / (2 * h)
            assert fd == pytest.approx(v.grad[idx].item(), rel=1e-4, abs=1e-12)


class TestTotalLoss:
    def test_default_weights(self):
        parts = total_loss(1.0, 1.0, 1.0, 1.0)
        assert parts.total == pytest.approx(2.12, abs=1e-12)

    def test_sup_only(self):
        parts = total_loss(3.5, 9.9, 9.9, 9.9, lambda_u=0, lambda_itcl_sup=0,
                           lambda_itcl_unsup=0)
        assert parts.total == 3.5

    def test_burnin_equivalence(self):
        assert total_loss(1.2, 7.0, 0.0, 0.0, lambda_u=0.0).total == \
               total_loss(1.2, 0.0, 0.0, 0.0).total

    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
           st.lists(st.floats(0, 5), min_size=3, max_size=3))
    def test_identity(self, parts, weights):
        lb = total_loss(*parts, *weights)
        expected = (parts[0] + weights[0] * parts[1] + weights[1] * parts[2]
                    + weights[2] * parts[3])
        assert lb.total == expected


class TestMetrics:
    def test_identical(self):
        m = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(float)
        assert dice_metric(m, m) == 1.0
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4)); a[0, 0] = 1
        b = np.zeros((4, 4)); b[3, 3] = 1
        assert dice_metric(a, b) == 0.0

    def test_partial_overlap(self):
        a = np.zeros((4, 4)); a[0, 0] = a[0, 1] = 1
        b = np.zeros((4, 4)); b[0, 1] = b[0, 2] = 1
        assert dice_metric(a, b) == 0.5
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty_convention(self):
        z = np.zeros((4, 4))
        assert dice_metric(z, z) == 1.0
        assert iou(z, z) == 1.0
        assert miou_metric([z], [z]) == 1.0

    @given(st.integers(0, 200))
    @settings(max_examples=50, deadline=None)
    def test_brute_force_counting(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.random((16, 16)) > 0.6).astype(float)
        b = (rng.random((16, 16)) > 0.6).astype(float)
        inter = sum(1 for y in range(16) for x in range(16) if a[y, x] and b[y, x])
        na = int(a.sum()); nb = int(b.sum())
        union = na + nb - inter
        expected_dice = 2 * inter / (na + nb) if na + nb else 1.0
        expected_iou = inter / union if union else 1.0
        assert dice_metric(a, b) == expected_dice
        assert iou(a, b) == expected_iou
