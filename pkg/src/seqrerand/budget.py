"""Rerandomization budgets and acceptance thresholds.

A budget assigns each group an expected number of randomizations s_k; the
acceptance probability of a single draw in group k is 1/s_k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .distributions import nc_chi2_quantile
from .errors import DomainError, InfeasibleBudget

DEFAULT_CAP_MULTIPLIER = 10
LARGE_BUDGET = 2000
LARGE_BUDGET_FLOOR = 10


@dataclass(frozen=True)
class BudgetPlan:
    """Per-group expected randomization counts.

    ``cap_multiplier * s_k`` is the hard attempt limit for group k before
    the best draw seen is used instead.
    """

    total: int
    per_group: tuple[int, ...]
    floor: int = 1
    cap_multiplier: int = DEFAULT_CAP_MULTIPLIER

    def __post_init__(self):
        per_group = tuple(int(s) for s in self.per_group)
        if not per_group or any(s < 1 for s in per_group):
            raise DomainError("every s_k must be a positive integer")
        if sum(per_group) != self.total:
            raise DomainError(f"budget {per_group} does not sum to {self.total}")
        if self.floor < 1 or self.cap_multiplier < 1:
            raise DomainError("floor and cap multiplier must be positive")
        object.__setattr__(self, "per_group", per_group)

    @classmethod
    def explicit(cls, per_group: Sequence[int], cap_multiplier: int = DEFAULT_CAP_MULTIPLIER):
        """Wrap a user-supplied vector without re-deriving it."""
        per_group = tuple(int(s) for s in per_group)
        return cls(sum(per_group), per_group, min(per_group), cap_multiplier)

    @property
    def K(self) -> int:
        return len(self.per_group)

    def cap(self, k: int) -> int:
        return self.cap_multiplier * self.per_group[k]


def cp_constant(p: int) -> float:
    """``2p Gamma(p/2 + 1)^{2/p} / (p + 2)``."""
    if p < 1:
        raise DomainError("p must be positive")
    return 2.0 * p * math.exp((2.0 / p) * math.lgamma(p / 2 + 1)) / (p + 2)


def default_floor(S: int, K: int) -> int:
    """10 for S >= 2000, otherwise max(1, S // (2K)) capped at 10."""
    if S >= LARGE_BUDGET:
        return LARGE_BUDGET_FLOOR
    return min(LARGE_BUDGET_FLOOR, max(1, S // (2 * K)))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def recursion_target(p: int, n_prev: int, n_cur: int, s_cur: float) -> float:
    """Optimal s_{k-1} given s_k: ``(C_p n_{k-1} s_k / (p n_k))^{p/(p+2)}``."""
    return (cp_constant(p) * n_prev * s_cur / (p * n_cur)) ** (p / (p + 2))


def _chain(s_last: int, p: int, sizes: Sequence[int], floor: int) -> list[int]:
    K = len(sizes)
    s = [0] * K
    s[-1] = s_last
    for k in range(K - 1, 0, -1):
        target = recursion_target(p, sizes[k - 1], sizes[k], s[k])
        s[k - 1] = max(floor, _round_half_up(target))
    return s


def allocate(
    S: int,
    p: int,
    group_sizes: Sequence[int],
    floor: int | None = None,
    cap_multiplier: int = DEFAULT_CAP_MULTIPLIER,
) -> BudgetPlan:
    """Split a total budget ``S`` over K groups.

    The vector is built downward from a trial s_K with the optimal
    recursion, each earlier entry clamped at ``floor``; s_K is the largest
    value whose chain still fits in ``S`` and absorbs the remainder.
    """
    K = len(group_sizes)
    if K == 0:
        raise DomainError("need at least one group")
    if any(n <= 0 for n in group_sizes):
        raise DomainError("group sizes must be positive")
    if p < 1:
        raise DomainError("p must be positive")
    if floor is None:
        floor = default_floor(S, K)
    if floor < 1:
        raise DomainError("floor must be at least 1")
    if S < K * floor:
        raise InfeasibleBudget(f"S = {S} cannot give {K} groups at least {floor} each")
    if K == 1:
        return BudgetPlan(S, (S,), floor, cap_multiplier)

    lo, hi = floor, S
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if sum(_chain(mid, p, group_sizes, floor)) <= S:
            lo = mid
        else:
            hi = mid - 1
    s = _chain(lo, p, group_sizes, floor)
    if sum(s) > S:
        raise InfeasibleBudget(f"no budget vector with floor {floor} sums to {S}")
    s[-1] += S - sum(s)
    return BudgetPlan(S, tuple(s), floor, cap_multiplier)


def threshold(p: int, group_sizes: Sequence[int], k: int, M_prev: float, s_k: int) -> float:
    """Acceptance threshold a_k for group ``k`` (1-based).

    ``a_k = (n_k / n_{1:k}) * Q(1/s_k; p, (n_{1:k} - n_k) M_prev / n_k)``
    where Q is the non-central chi-squared quantile. ``s_k = 1`` accepts the
    first draw and returns infinity.
    """
    if not 1 <= k <= len(group_sizes):
        raise DomainError(f"group index {k} outside 1..{len(group_sizes)}")
    if s_k < 1:
        raise DomainError("s_k must be at least 1")
    if M_prev < 0:
        raise DomainError("M_prev must be non-negative")
    if s_k == 1:
        return math.inf
    n_k = group_sizes[k - 1]
    n_cum = sum(group_sizes[:k])
    lam = (n_cum - n_k) / n_k * M_prev
    return n_k / n_cum * nc_chi2_quantile(1.0 / s_k, p, lam)


def complete_threshold(p: int, S: int) -> float:
    """Threshold of one-shot rerandomization with acceptance probability 1/S."""
    return threshold(p, (1,), 1, 0.0, S)


# Published budget vectors, keyed by (p, S, group sizes n_k). They are not
# what ``allocate`` returns; pass them through ``BudgetPlan.explicit`` to
# reproduce the published experiments.
TABULATED_BUDGETS = {
    (5, 2000, (1, 1, 1, 1, 1)): (10, 12, 22, 120, 1836),
    (2, 10000, (1, 1, 1)): (10, 74, 9916),
    (12, 2000, (92, 91, 91)): (62, 284, 1654),
    (12, 2000, (110, 110, 54)): (94, 472, 1434),
    (12, 2000, (55, 55, 55, 55, 54)): (10, 19, 56, 272, 1643),
    (12, 2000, (28, 28, 28, 28, 27, 27, 27, 27, 27, 27)): (10, 10, 10, 10, 10, 12, 19, 55, 264, 1600),
}
