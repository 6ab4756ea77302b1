"""Closed-form reference laws for cluster growth.

Times here are in mean-free-time units (collision rate 1 per particle).
Under that normalisation each cluster member acquires new partners at rate
one, so the size is a Yule process: P(k) = e^-t (1 - e^-t)^k, every tree
with k creations carries the same weight e^-t (1 - e^-t)^k / k!.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

MAX_COUNT_K = 20
MAX_ENUM_K = 8


def _check_time(t: float) -> None:
    if not t >= 0 or math.isinf(t):
        raise ValueError(f"time must be finite and >= 0, got {t!r}")


def _check_k(k: int) -> None:
    if int(k) != k or k < 0:
        raise ValueError(f"k must be a non-negative integer, got {k!r}")


def wild_cluster_pmf(k: int, t: float) -> float:
    _check_k(k)
    _check_time(t)
    if t == 0:
        return 1.0 if k == 0 else 0.0
    # -expm1(-t) keeps 1 - e^-t accurate for small t
    return math.exp(-t + k * math.log(-math.expm1(-t)))


def wild_mean_size(t: float) -> float:
    _check_time(t)
    return math.expm1(t)


def validate_tree(gamma) -> tuple[int, ...]:
    gamma = tuple(int(k) for k in gamma)
    for r, k in enumerate(gamma, start=1):
        if not 1 <= k <= r:
            raise ValueError(f"k_{r}={k} outside 1..{r}")
    return gamma


def tree_weight(gamma, t: float) -> float:
    """Weight of one tree; the same for all trees with the same number of nodes."""
    gamma = validate_tree(gamma)
    k = len(gamma)
    return wild_cluster_pmf(k, t) / math.factorial(k)


def count_trees(k: int) -> int:
    _check_k(k)
    if k > MAX_COUNT_K:
        raise ValueError(f"count_trees is limited to k <= {MAX_COUNT_K}")
    return math.factorial(k)


def enumerate_trees(k: int) -> list[tuple[int, ...]]:
    """All trees with k nodes in lexicographic order."""
    _check_k(k)
    if k > MAX_ENUM_K:
        raise ValueError(f"enumerate_trees is limited to k <= {MAX_ENUM_K}")
    return list(itertools.product(*[range(1, r + 1) for r in range(1, k + 1)]))


@dataclass(frozen=True)
class TheoryParams:
    t: float
    C: float = 1.0
    k0: int = 0

    def __post_init__(self):
        _check_time(self.t)
        if not self.C > 0:
            raise ValueError("C must be positive")
        _check_k(self.k0)


def log_theorem_tail_bound(k: int, p: TheoryParams) -> float:
    _check_k(k)
    if k <= p.k0:
        raise ValueError(f"the tail bound is only asserted for k > k0={p.k0}")
    ct = p.C * p.t
    if ct == 0:
        return -math.inf
    e = math.log(k) / ct if k > 0 else -math.inf
    if e > 700:
        return -math.inf
    return math.log(ct) - k ** (1.0 / ct) / 4.0


def theorem_tail_bound(k: int, p: TheoryParams) -> float:
    """C t exp(-k^(1/(C t)) / 4), for k > k0."""
    return math.exp(log_theorem_tail_bound(k, p))


def rough_bound(k: int, C: float, t: float) -> float:
    """(C t)^k, the naive short-time estimate."""
    _check_k(k)
    _check_time(t)
    return (C * t) ** k


def geometric_tail(k: int, t: float) -> float:
    """P(size >= k) under the Yule law, (1 - e^-t)^k."""
    _check_k(k)
    _check_time(t)
    return (-math.expm1(-t)) ** k


def truncation_for(t: float, tol: float = 1e-13) -> int:
    """Smallest K whose neglected tail (1 - e^-t)^(K+1) is below tol."""
    _check_time(t)
    if t == 0:
        return 0
    return max(0, math.ceil(math.log(tol) / math.log(-math.expm1(-t))) - 1)


def theory_table(t: float, kmax: int, C: float = 1.0, k0: int = 0) -> list[dict]:
    """Rows k = 0..kmax with the closed forms side by side (bound blank for k <= k0)."""
    p = TheoryParams(t, C, k0)
    rows = []
    for k in range(kmax + 1):
        rows.append({
            "k": k,
            "pmf": wild_cluster_pmf(k, t),
            "tree_weight": wild_cluster_pmf(k, t) / math.factorial(k),
            "n_trees": math.factorial(k) if k <= MAX_COUNT_K else None,
            "rough_bound": rough_bound(k, C, t),
            "tail_bound": theorem_tail_bound(k, p) if k > k0 else None,
        })
    return rows
