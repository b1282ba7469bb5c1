import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoparse.errors import AllZeroDifferences, TooFewPairs
from protoparse.stats import average_ranks, signed_rank_null, wilcoxon_signed_rank


def enumerate_p(a, b):
    """Two-sided p-value by listing all 2^n sign assignments of the ranks."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    ranks = average_ranks(np.abs(d))
    w = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    sums = np.array(sums)
    lower = np.mean(sums <= w + 1e-9)
    upper = np.mean(sums >= w - 1e-9)
    return min(1.0, 2 * min(lower, upper))


class TestRanks:
    def test_ties_share_mean_rank(self):
        np.testing.assert_array_equal(average_ranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])

    def test_null_sums_to_one(self):
        dist = signed_rank_null([1, 2, 3, 4])
        assert abs(dist.sum() - 1.0) < 1e-15
        # 2 * W+ = 0 only when every sign is negative
        assert dist[0] == 1 / 16


class TestWilcoxon:
    def test_all_positive_six(self):
        a = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        b = [0.4, 0.4, 0.4, 0.4, 0.4, 0.4]
        assert wilcoxon_signed_rank(a, b) == pytest.approx(2 / 64, abs=1e-15)

    def test_identical_lists(self):
        with pytest.raises(AllZeroDifferences):
            wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])

    def test_too_few_pairs(self):
        with pytest.raises(TooFewPairs):
            wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 5, 6])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2], [1])

    @given(st.integers(5, 12), st.integers(0, 2**31 - 1), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_exact_matches_enumeration(self, n, seed, ties):
        rng = np.random.default_rng(seed)
        if ties:
            a, b = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            a, b = rng.random(n), rng.random(n)
        if np.count_nonzero(a - b) < 5:
            return
        assert abs(wilcoxon_signed_rank(a, b) - enumerate_p(a, b)) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_approximation_close_at_twenty(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(20), rng.random(20)
        exact = wilcoxon_signed_rank(a, b, exact_max_n=20)
        approx = wilcoxon_signed_rank(a, b, exact_max_n=19)
        assert abs(exact - approx) < 0.02
