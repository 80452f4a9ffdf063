import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ovdkt.losses import LossWeights, bbox_loss
from ovdkt.matcher import ShapeError, brute_force_assignment, hungarian, match_cost


def injections_oracle(C):
    """Independent enumeration: smallest total, then lexicographically smallest pair list."""
    M, N = C.shape
    best = None
    for cols in itertools.permutations(range(N), M):
        key = (math.fsum(C[r, c] for r, c in enumerate(cols)), cols)
        if best is None or key[0] < best[0] - 1e-12 or (abs(key[0] - best[0]) <= 1e-12 and cols < best[1]):
            best = key
    return best


class TestMatchCost:
    def test_single_entry(self, small_space):
        _, _, bank = small_space
        pred = np.array([[0.5, 0.5, 0.2, 0.2]])
        gt = np.array([[0.52, 0.5, 0.2, 0.2]])
        e = bank.vectors[[1]]
        C = match_cost(e, pred, [1], gt, bank, 0.07)
        p = 1 / (1 + math.exp(-1 / 0.07))
        assert C.shape == (1, 1)
        assert C[0, 0] == pytest.approx(-p + bbox_loss(pred[0], gt[0])[0], abs=1e-12)

    def test_perfect_query(self, small_space):
        _, _, bank = small_space
        b = np.array([[0.3, 0.6, 0.2, 0.3]])
        C = match_cost(bank.vectors[[2]], b, [2], b, bank, 0.07)
        assert abs(C[0, 0] + 0.9999994) <= 1e-7

    def test_scale_invariance_in_e(self, small_space, rng):
        _, _, bank = small_space
        e = rng.standard_normal((5, bank.dimension))
        b = rng.uniform(0.3, 0.6, (5, 4))
        gt = rng.uniform(0.3, 0.6, (2, 4))
        np.testing.assert_allclose(match_cost(2 * e, b, [0, 3], gt, bank),
                                   match_cost(e, b, [0, 3], gt, bank), rtol=1e-13)

    def test_weights_enter_box_term(self, small_space):
        _, _, bank = small_space
        e = bank.vectors[[0, 1]]
        b = np.array([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.3, 0.3]])
        gt = np.array([[0.35, 0.3, 0.2, 0.25]])
        w = LossWeights(1.0, 0.5)
        C = match_cost(e, b, [0], gt, bank, 0.07, w)
        for j in range(2):
            p = 1 / (1 + math.exp(-float(bank.vectors[0] @ e[j]) / 0.07))
            assert C[0, j] == pytest.approx(-p + bbox_loss(b[j], gt[0], w)[0], abs=1e-12)


class TestHungarian:
    def test_two_by_two(self):
        r = hungarian([[1, 2], [2, 1]])
        assert r.pairs == ((0, 0), (1, 1)) and r.total_cost == 2

    def test_zero_diagonal(self):
        C = np.full((4, 4), 100.0)
        np.fill_diagonal(C, 0.0)
        r = hungarian(C)
        assert r.pairs == tuple((i, i) for i in range(4)) and r.total_cost == 0

    def test_three_by_five(self, rng):
        C = rng.standard_normal((3, 5))
        assert hungarian(C).total_cost == pytest.approx(injections_oracle(C)[0], abs=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            hungarian(np.zeros((3, 2)))

    def test_empty(self):
        assert hungarian(np.zeros((0, 3))).pairs == ()

    def test_ties_are_lexicographic(self):
        C = np.zeros((2, 3))
        assert hungarian(C).pairs == ((0, 0), (1, 1))
        C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
        assert hungarian(C).pairs == ((0, 1), (1, 0))

    @given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 10_000), st.booleans())
    def test_matches_enumeration(self, M, extra, seed, integer):
        rng = np.random.default_rng(seed)
        N = M + extra
        C = rng.integers(0, 4, (M, N)).astype(float) if integer else rng.standard_normal((M, N))
        total, cols = injections_oracle(C)
        r = hungarian(C)
        assert r.total_cost == pytest.approx(total, abs=1e-9)
        assert tuple(c for _, c in r.pairs) == cols


class TestBruteForce:
    def test_examples(self):
        assert brute_force_assignment([[5.0]]).pairs == ((0, 0),)
        assert brute_force_assignment([[5.0]]).total_cost == 5
        assert brute_force_assignment([[1, 2], [2, 1]]) == hungarian([[1, 2], [2, 1]])

    def test_not_worse_than_any_permutation(self, rng):
        C = rng.standard_normal((4, 4))
        best = brute_force_assignment(C).total_cost
        for perm in itertools.permutations(range(4)):
            assert best <= sum(C[i, perm[i]] for i in range(4)) + 1e-12

    def test_size_limit(self):
        with pytest.raises(ValueError):
            brute_force_assignment(np.zeros((2, 9)))


class TestInvariances:
    @given(st.integers(0, 10_000))
    def test_row_shift_keeps_optimum(self, seed):
        rng = np.random.default_rng(seed)
        M = int(rng.integers(1, 5))
        N = M + int(rng.integers(0, 3))
        C = rng.standard_normal((M, N))
        shift = rng.standard_normal(M)[:, None]
        assert hungarian(C + shift).pairs == hungarian(C).pairs

    @given(st.integers(0, 10_000))
    def test_column_permutation(self, seed):
        rng = np.random.default_rng(seed)
        M, N = 3, 5
        C = rng.standard_normal((M, N))
        perm = rng.permutation(N)
        base = dict(hungarian(C).pairs)
        moved = dict(hungarian(C[:, perm]).pairs)
        assert {i: int(perm[j]) for i, j in moved.items()} == base
