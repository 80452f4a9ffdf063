import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ovdkt.concepts import (
    FilterConfig,
    PriorConfigError,
    binary_oracle_existence,
    filter_by_threshold,
    pad_priors,
    score_concepts_similarity,
    training_priors,
)
from ovdkt.embedding import CategorySpace, DomainError
from ovdkt.scenes import GroundTruthObject, SyntheticScene


def _scene(labels):
    objs = tuple(GroundTruthObject(np.array([0.5, 0.5, 0.2, 0.2]), c, np.eye(4)[0]) for c in labels)
    return SyntheticScene(0, np.zeros((4, 4)), objs)


class TestFilterConfig:
    @pytest.mark.parametrize("kw", [{"rho": 0.0}, {"rho": 1.0}, {"max_priors": 0}, {"method": "vote"},
                                    {"oracle_error_rate": 1.0}, {"tau": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(PriorConfigError):
            FilterConfig(**kw)


class TestScoreSimilarity:
    def test_matching_summary_at_unit_temperature(self, small_space):
        _, _, bank = small_space
        s = score_concepts_similarity(bank.vectors[2], bank, tau=1.0)
        assert s[2] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
        assert s[2] == pytest.approx(0.7311, abs=1e-4)

    def test_orthogonal_is_half(self):
        bank = np.eye(3)
        s = score_concepts_similarity(np.array([0.0, 1.0, 0.0]), bank, tau=0.07)
        assert s[0] == 0.5 and s[2] == 0.5

    def test_scale_invariant(self, small_space, rng):
        _, _, bank = small_space
        v = rng.standard_normal(bank.dimension)
        np.testing.assert_allclose(score_concepts_similarity(3 * v, bank), score_concepts_similarity(v, bank),
                                   rtol=1e-12)

    def test_zero_summary(self, small_space):
        _, _, bank = small_space
        with pytest.raises(DomainError):
            score_concepts_similarity(np.zeros(bank.dimension), bank)


class TestThreshold:
    scores = [0.95, 0.80, 0.30]

    def test_examples(self):
        assert filter_by_threshold(self.scores, 0.7) == [0, 1]
        assert filter_by_threshold(self.scores, 0.9) == [0]
        assert filter_by_threshold(self.scores, 0.99) == []

    def test_order_and_ties(self):
        assert filter_by_threshold([0.8, 0.9, 0.8], 0.5) == [1, 0, 2]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_monotone_in_rho(self, scores, r1, r2):
        lo, hi = sorted((r1, r2))
        assert set(filter_by_threshold(scores, hi)) <= set(filter_by_threshold(scores, lo))
        assert all(scores[i] >= hi for i in filter_by_threshold(scores, hi))


class TestOracle:
    def test_perfect(self):
        cs = CategorySpace.make(6, 3)
        assert binary_oracle_existence([5, 1, 1, 7], cs, 0.0, seed=3) == [1, 5, 7]
        assert binary_oracle_existence([], cs, 0.0, seed=3) == []

    def test_false_positive_rate(self):
        cs = CategorySpace.make(10, 0)
        fp = n = 0
        for s in range(1000):
            kept = binary_oracle_existence([0], cs, 0.1, seed=s)
            fp += len([c for c in kept if c != 0])
            n += 9
        assert abs(fp / n - 0.1) <= 0.01

    def test_deterministic(self):
        cs = CategorySpace.make(10, 0)
        assert binary_oracle_existence([2], cs, 0.3, seed=8) == binary_oracle_existence([2], cs, 0.3, seed=8)


class TestPadPriors:
    cs = CategorySpace.make(3, 2)

    def test_examples(self):
        assert pad_priors([1, 4], 2, self.cs) == [1, 4]
        assert pad_priors([1, 4, 0], 2, self.cs) == [1, 4]
        out = pad_priors([2], 3, self.cs, seed=5)
        assert out[0] == 2 and len(set(out)) == 3 and 2 not in out[1:]

    def test_L_too_large(self):
        with pytest.raises(PriorConfigError):
            pad_priors([], 6, self.cs)

    def test_pool_used_first(self):
        out = pad_priors([3], 3, self.cs, seed=0, pool=[0, 1])
        assert out[0] == 3 and set(out[1:]) == {0, 1}

    @given(st.lists(st.integers(0, 4), unique=True, max_size=5), st.integers(1, 5), st.integers(0, 100))
    def test_contract(self, retained, L, seed):
        out = pad_priors(retained, L, self.cs, seed=seed)
        assert len(out) == L == len(set(out))
        assert out[: min(L, len(retained))] == retained[:L]
        assert out == pad_priors(retained, L, self.cs, seed=seed)


class TestTrainingPriors:
    def test_examples(self):
        assert training_priors(_scene([3, 3, 7])) == [3, 7]
        assert training_priors(_scene([])) == []
        assert training_priors(_scene([0])) == [0]
