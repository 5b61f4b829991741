import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nca_sensing.stats import EXACT_LIMIT, mann_whitney_u, midranks


def pairwise_u(a, b):
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)


def permutation_p(a, b, alternative="two-sided"):
    """Exact p by enumerating every relabelling of the pooled sample."""
    pooled = list(a) + list(b)
    n1, n = len(a), len(a) + len(b)
    mu = Fraction(len(a) * len(b), 2)
    obs = Fraction(pairwise_u(a, b))
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        chosen = set(idx)
        u = Fraction(pairwise_u([pooled[i] for i in idx], [pooled[i] for i in range(n) if i not in chosen]))
        total += 1
        if alternative == "two-sided":
            hits += abs(u - mu) >= abs(obs - mu)
        elif alternative == "less":
            hits += u <= obs
        else:
            hits += u >= obs
    return float(obs), min(1.0, hits / total)


def fixture_cases():
    rng = np.random.default_rng(12)
    cases = []
    for n1 in range(1, 7):
        for n2 in range(1, EXACT_LIMIT - n1 + 1):
            if n2 > 7:
                continue
            cont = rng.normal(size=n1 + n2).round(3)
            tied = rng.integers(0, 4, size=n1 + n2).astype(float)
            cases.append((list(cont[:n1]), list(cont[n1:])))
            cases.append((list(tied[:n1]), list(tied[n1:])))
    return cases


CASES = fixture_cases()


class TestExact:
    def test_disjoint_support(self):
        u, p = mann_whitney_u([1, 2, 3], [10, 11, 12])
        assert u == 0.0 and p == pytest.approx(0.1)
        assert mann_whitney_u([1, 2, 3], [10, 11, 12], alternative="less")[1] == pytest.approx(0.05)

    def test_two_by_two(self):
        u, p = mann_whitney_u([1, 2], [3, 4])
        assert u == 0.0 and p == pytest.approx(1 / 3)

    def test_tied_singletons(self):
        assert mann_whitney_u([1], [1]) == (0.5, 1.0)

    @pytest.mark.parametrize("alternative", ["two-sided", "less", "greater"])
    def test_matches_permutation_enumeration(self, alternative):
        assert all(len(a) + len(b) <= EXACT_LIMIT for a, b in CASES)
        for a, b in CASES:
            u, p = mann_whitney_u(a, b, alternative=alternative)
            ou, op = permutation_p(a, b, alternative)
            assert u == ou
            assert p == pytest.approx(op, abs=1e-12), (a, b)

    def test_asymptotic_close_to_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=6), rng.normal(0.5, 1, size=6)
            pe = mann_whitney_u(a, b, method="exact")[1]
            pa = mann_whitney_u(a, b, method="asymptotic")[1]
            assert abs(pe - pa) <= 0.05


class TestAsymptotic:
    def test_agrees_with_scipy(self):
        stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.integers(0, 10, size=25).astype(float)
            b = rng.integers(1, 11, size=30).astype(float)
            for alt in ("two-sided", "less", "greater"):
                ref = stats.mannwhitneyu(a, b, alternative=alt, method="asymptotic")
                u, p = mann_whitney_u(a, b, alternative=alt)
                assert u == ref.statistic
                assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_all_tied(self):
        assert mann_whitney_u([2.0] * 10, [2.0] * 10) == (50.0, 1.0)

    def test_mirrored_samples(self):
        a = np.arange(20.0)
        u, p = mann_whitney_u(a, -a)
        u2, _ = mann_whitney_u(a, a)
        assert u2 == 200.0 and p < 1e-6


def test_input_validation():
    with pytest.raises(ValueError):
        mann_whitney_u([], [1])
    with pytest.raises(ValueError):
        mann_whitney_u([1], [2], alternative="sideways")


def test_midranks():
    np.testing.assert_array_equal(midranks([3, 1, 3, 2]), [3.5, 1, 3.5, 2])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=15), st.lists(st.integers(0, 5), min_size=1, max_size=15))
def test_u_properties(a, b):
    u, p = mann_whitney_u(a, b)
    v, q = mann_whitney_u(b, a)
    assert u == pairwise_u(a, b)
    assert u + v == len(a) * len(b)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(q, abs=1e-12)
