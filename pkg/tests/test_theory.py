import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from hsclusters.theory import (
    TheoryParams,
    count_trees,
    enumerate_trees,
    log_theorem_tail_bound,
    rough_bound,
    theorem_tail_bound,
    theory_table,
    tree_weight,
    truncation_for,
    wild_cluster_pmf,
    wild_mean_size,
)

LN2 = math.log(2)
T_VALUES = [0.1, 0.5, 1.0, 2.0, 5.0]


def test_pmf_examples():
    assert wild_cluster_pmf(0, 0.0) == 1.0
    assert wild_cluster_pmf(3, 0.0) == 0.0
    assert [wild_cluster_pmf(k, LN2) for k in range(3)] == pytest.approx([0.5, 0.25, 0.125], abs=1e-15)
    with pytest.raises(ValueError):
        wild_cluster_pmf(-1, 1.0)
    with pytest.raises(ValueError):
        wild_cluster_pmf(1, -0.5)


@pytest.mark.parametrize("t", T_VALUES)
def test_normalisation_and_mean(t):
    K = truncation_for(t)
    total = math.fsum(wild_cluster_pmf(k, t) for k in range(K + 1))
    assert abs(total - 1) < 1e-12
    mean = math.fsum(k * wild_cluster_pmf(k, t) for k in range(K + 1))
    assert abs(mean - wild_mean_size(t)) < 1e-8


@pytest.mark.parametrize("t", T_VALUES)
def test_truncation_error_is_the_geometric_tail(t):
    # at K = ceil(50 (1 + t)) the neglected mass is exactly (1 - e^-t)^(K+1);
    # that is far above 1e-12 once t >= 2
    K = math.ceil(50 * (1 + t))
    total = math.fsum(wild_cluster_pmf(k, t) for k in range(K + 1))
    assert 1 - total == pytest.approx((1 - math.exp(-t)) ** (K + 1), rel=1e-6, abs=1e-15)


def test_mean_examples():
    assert wild_mean_size(0) == 0
    assert wild_mean_size(LN2) == pytest.approx(1.0, abs=1e-15)
    s = math.fsum(k * wild_cluster_pmf(k, 2.0) for k in range(201))
    assert s == pytest.approx(math.e**2 - 1, abs=1e-8)


def test_tree_counts_and_enumeration():
    assert count_trees(0) == 1 and count_trees(3) == 6 and count_trees(8) == 40320
    for k in range(9):
        assert count_trees(k) == math.factorial(k)
        trees = enumerate_trees(k)
        assert len(trees) == count_trees(k)
        assert trees == sorted(trees)
        assert len(set(trees)) == len(trees)
        assert all(1 <= g[r - 1] <= r for g in trees for r in range(1, k + 1))
    assert enumerate_trees(1) == [(1,)]
    assert enumerate_trees(2) == [(1, 1), (1, 2)]
    with pytest.raises(ValueError):
        count_trees(21)
    with pytest.raises(ValueError):
        enumerate_trees(9)


def test_tree_weight_examples_and_sum():
    assert tree_weight((), 0.7) == pytest.approx(math.exp(-0.7))
    assert tree_weight((1,), LN2) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        tree_weight((1, 3), 1.0)
    for t in T_VALUES:
        for k in range(9):
            total = math.fsum(tree_weight(g, t) for g in enumerate_trees(k))
            assert abs(total - wild_cluster_pmf(k, t)) < 1e-12
            assert abs(math.factorial(k) * tree_weight((1,) * k, t) - wild_cluster_pmf(k, t)) < 1e-12


def time_ordered_weight(k, t):
    """The k-fold time-ordered integral with survival factors, by quadrature.

    Between creations r and r+1 there are r+1 particles alive, so the
    no-creation factor over (t_{r+1}, t_r) is exp(-(r+1)(t_r - t_{r+1})), and
    the last stretch down to 0 has k+1 particles.
    """
    def integrand(*ts):
        ts = (t,) + ts[::-1] + (0.0,)
        return math.exp(-sum((r + 1) * (ts[r] - ts[r + 1]) for r in range(k + 1)))

    if k == 0:
        return math.exp(-t)
    # nquad order: innermost first; t_k in (0, t_{k-1}), ..., t_1 in (0, t)
    ranges = []
    for depth in range(k):
        if depth == k - 1:
            ranges.append((0, t))
        else:
            ranges.append(lambda *outer: (0, outer[0]))
    val, _ = integrate.nquad(integrand, ranges, opts={"epsabs": 1e-11, "epsrel": 1e-11})
    return val


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_tree_weight_against_quadrature(k, t):
    assert time_ordered_weight(k, t) == pytest.approx(tree_weight((1,) * k, t), abs=1e-6)


def test_theorem_bound_examples():
    assert theorem_tail_bound(16, TheoryParams(1.0, 1.0, 0)) == pytest.approx(math.exp(-4), rel=1e-12)
    assert theorem_tail_bound(16, TheoryParams(2.0, 1.0, 0)) == pytest.approx(2 * math.exp(-1), rel=1e-12)
    assert math.exp(-4) == pytest.approx(0.018316, abs=1e-6)
    with pytest.raises(ValueError):
        theorem_tail_bound(3, TheoryParams(1.0, 1.0, 3))
    with pytest.raises(ValueError):
        TheoryParams(1.0, 0.0)
    with pytest.raises(ValueError):
        TheoryParams(-1.0, 1.0)


@given(st.floats(0.2, 5), st.floats(0.5, 4), st.integers(0, 50))
def test_theorem_bound_shape(t, C, k0):
    p = TheoryParams(t, C, k0)
    ks = range(k0 + 1, k0 + 60)
    logs = [log_theorem_tail_bound(k, p) for k in ks]
    assert all(np.isfinite(logs))
    assert all(a > b for a, b in zip(logs, logs[1:]))
    for k, lg in zip(ks, logs):
        assert lg == math.log(C * t) - k ** (1 / (C * t)) / 4
        b = theorem_tail_bound(k, p)
        assert b == math.exp(lg)
        assert b > 0 or lg < -745


def test_rough_bound():
    assert rough_bound(0, 3.0, 2.0) == 1
    assert rough_bound(3, 1.0, 0.5) == 0.125
    # rough bound blows up for C t > 1 while the Yule law stays normalised
    assert rough_bound(60, 1.0, 2.0) > 1e17
    assert theorem_tail_bound(10**6, TheoryParams(0.01, 1.0)) == 0.0
    assert sum(wild_cluster_pmf(k, 2.0) for k in range(200)) <= 1 + 1e-12


def test_theory_table():
    rows = theory_table(LN2, 10, C=1.0, k0=2)
    assert [r["k"] for r in rows] == list(range(11))
    for r in rows:
        assert r["pmf"] == pytest.approx(0.5 ** (r["k"] + 1), rel=1e-12)
        assert (r["tail_bound"] is None) == (r["k"] <= 2)
