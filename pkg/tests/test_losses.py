import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ovdkt.embedding import DomainError
from ovdkt.losses import (
    LossWeights,
    bbox_loss,
    finite_diff_gradient,
    focal_loss,
    giou,
    iou,
    relative_error,
    similarity_prob,
)


def giou_oracle(a, b):
    """Plain-Python generalized IoU on clamped corners."""
    def corners(x):
        cx, cy, w, h = x
        return [min(max(v, 0.0), 1.0) for v in (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)]
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = area_a + area_b - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def focal_oracle(p, target, alpha=0.25, gamma=2.0):
    total = 0.0
    for k, pk in enumerate(p):
        if k == target:
            total += -alpha * (1 - pk) ** gamma * math.log(pk)
        else:
            total += -(1 - alpha) * pk**gamma * math.log(1 - pk)
    return total


@st.composite
def boxes(draw):
    w = draw(st.floats(0.05, 0.6))
    h = draw(st.floats(0.05, 0.6))
    cx = draw(st.floats(w / 2, 1 - w / 2))
    cy = draw(st.floats(h / 2, 1 - h / 2))
    return np.array([cx, cy, w, h])


def random_box(rng):
    w, h = rng.uniform(0.1, 0.5, 2)
    return np.array([rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01), rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01), w, h])


class TestGiou:
    def test_identity(self):
        assert giou([0.3, 0.4, 0.2, 0.1], [0.3, 0.4, 0.2, 0.1]) == pytest.approx(1.0, abs=1e-15)

    def test_diagonal_quadrants(self):
        assert abs(giou([0.25, 0.25, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5]) - (-0.5)) <= 1e-9

    def test_touching_side_by_side(self):
        assert abs(giou([0.25, 0.5, 0.5, 1.0], [0.75, 0.5, 0.5, 1.0])) <= 1e-9

    def test_degenerate(self):
        with pytest.raises(DomainError):
            giou([1.2, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2])

    @given(boxes(), boxes())
    def test_matches_oracle_and_bounds(self, a, b):
        g = giou(a, b)
        assert g == pytest.approx(giou_oracle(a, b), abs=1e-12)
        assert g == pytest.approx(giou(b, a), abs=1e-12)
        assert -1 - 1e-12 <= g <= iou(a, b) + 1e-12


class TestBboxLoss:
    def test_zero_at_identity(self):
        b = np.array([0.4, 0.6, 0.3, 0.2])
        loss, grad = bbox_loss(b, b)
        assert loss == pytest.approx(0.0, abs=1e-15)
        # right-derivative convention: every L1 coordinate contributes +lambda_L1
        lw = LossWeights()
        g_l1 = lw.lambda_L1 * np.ones(4)
        _, g_only_giou = bbox_loss(b, b, LossWeights(0.0, 2.0))
        np.testing.assert_allclose(grad - g_only_giou, g_l1)

    def test_worked_value(self):
        loss, _ = bbox_loss([0.25, 0.25, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5], LossWeights(5.0, 2.0))
        assert abs(loss - 8.0) <= 1e-9

    def test_gradient_vs_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            p, g = random_box(rng), random_box(rng)
            _, a = bbox_loss(p, g)
            n = finite_diff_gradient(lambda x: bbox_loss(x, g)[0], p)
            worst = max(worst, relative_error(a, n))
        assert worst <= 1e-5

    @given(boxes(), boxes())
    def test_nonnegative(self, a, b):
        assert bbox_loss(a, b)[0] >= -1e-12


class TestSimilarityProb:
    def test_self_similarity(self):
        t = np.eye(3)
        p = similarity_prob(t[1], t, 0.07)
        assert abs(p[1] - 1 / (1 + math.exp(-1 / 0.07))) <= 1e-9
        assert p[1] == pytest.approx(0.9999994, abs=1e-7)
        assert p[0] == 0.5

    def test_scale_invariance(self, rng):
        t = rng.standard_normal((5, 6))
        e = rng.standard_normal(6)
        np.testing.assert_allclose(similarity_prob(2 * e, t), similarity_prob(e, t), rtol=1e-13)

    def test_not_normalized(self, rng):
        t = np.eye(4)
        assert similarity_prob(np.ones(4), t).sum() > 1.0

    def test_zero_embedding(self):
        with pytest.raises(DomainError):
            similarity_prob(np.zeros(3), np.eye(3))


class TestFocal:
    def test_worked_value(self):
        loss, _ = focal_loss(np.array([0.5]), 0, 0.25, 2.0)
        assert abs(loss - 0.25 * 0.25 * math.log(2)) <= 1e-9
        assert loss == pytest.approx(0.04332, abs=1e-5)

    def test_perfect_prediction(self):
        loss, _ = focal_loss(np.array([1e-12, 1 - 1e-12, 1e-12]), 1)
        assert loss < 1e-6

    def test_matches_oracle(self, rng):
        for _ in range(50):
            p = rng.uniform(0.01, 0.99, 5)
            t = int(rng.integers(-1, 5))
            t = None if t < 0 else t
            assert focal_loss(p, t)[0] == pytest.approx(focal_oracle(p, t), rel=1e-12)

    def test_half_bce_when_gamma_zero(self, rng):
        p = rng.uniform(0.01, 0.99, 4)
        bce = -math.log(p[2]) - sum(math.log(1 - p[k]) for k in (0, 1, 3))
        assert focal_loss(p, 2, alpha=0.5, gamma=0.0)[0] == pytest.approx(0.5 * bce, rel=1e-12)

    def test_clamped_at_extremes(self):
        loss, grad = focal_loss(np.array([0.0, 1.0]), 0)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_gradient_vs_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            p = rng.uniform(0.02, 0.98, 6)
            t = int(rng.integers(-1, 6))
            t = None if t < 0 else t
            _, a = focal_loss(p, t)
            worst = max(worst, relative_error(a, finite_diff_gradient(lambda x: focal_loss(x, t)[0], p)))
        assert worst <= 1e-5


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
        assert abs(g[0] - 6) <= 1e-6

    def test_constant(self):
        assert np.array_equal(finite_diff_gradient(lambda x: 4.0, np.ones(3)), np.zeros(3))

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            finite_diff_gradient(lambda x: float("nan"), np.ones(2))

    def test_does_not_mutate(self):
        x = np.array([1.0, 2.0])
        finite_diff_gradient(lambda v: float(v @ v), x)
        assert np.array_equal(x, [1.0, 2.0])
