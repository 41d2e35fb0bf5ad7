"""Rerandomization state machines and treatment-effect estimation.

Three designs are implemented: sequential rerandomization group by group,
one-shot (complete) rerandomization of the whole sample, and the pairwise
biased-coin procedure that picks the better of the two 1:1 assignments of
each arriving pair with probability q.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .budget import BudgetPlan, threshold
from .errors import DomainError, ShapeMismatch
from .linalg import (
    CovariateDataset,
    Mode,
    SpdMatrix,
    mahalanobis_heterogeneous,
    mahalanobis_homogeneous,
    sample_covariance,
    standardized_diff,
)

# float32 screening is confirmed in float64 for anything inside this margin
SCREEN_RTOL = 1e-2
SCREEN_ATOL = 1e-5
MAX_CHUNK = 1024
MIN_CHUNK = 16


def treated_count(n_units: int, omega: float) -> int:
    t = omega * n_units
    if abs(t - round(t)) > 1e-9 or not 0 < round(t) < n_units:
        raise DomainError(f"omega = {omega} does not split {n_units} units into two arms")
    return int(round(t))


def random_balanced_assignment(n_units: int, omega: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random 0/1 vector with exactly ``omega * n_units`` ones."""
    t = treated_count(n_units, omega)
    labels = np.zeros(n_units, dtype=np.int8)
    labels[:t] = 1
    return rng.permutation(labels)


def _draw_masks(rng: np.random.Generator, batch: int, m: int, t: int) -> np.ndarray:
    """``batch`` uniform balanced assignments as a boolean (batch, m) array.

    Treated units are the ``t`` smallest of m iid uniforms. Rows where a tie
    straddles the cut are redrawn, which keeps the law exactly uniform.
    """
    r = rng.random((batch, m), dtype=np.float32)
    cut = np.partition(r, t - 1, axis=1)[:, t - 1:t]
    masks = r <= cut
    bad = np.flatnonzero(masks.sum(axis=1) != t)
    for i in bad:
        while True:
            row = rng.random(m, dtype=np.float32)
            c = np.partition(row, t - 1)[t - 1]
            mask = row <= c
            if mask.sum() == t:
                masks[i] = mask
                break
    return masks


@dataclass(frozen=True)
class GroupDraw:
    assignment: np.ndarray
    M: float
    attempts: int
    fallback: bool
    threshold: float


def _chunk_size(s_k: int, cap: int) -> int:
    return int(min(cap, MAX_CHUNK, max(MIN_CHUNK, s_k // 16)))


def _rerandomize(Y, base, gain, scale, omega, t, a, cap, chunk, rng) -> tuple[np.ndarray, float, int, bool]:
    """Draw assignments of one group until the distance drops below ``a``.

    The candidate distance is ``scale * ||base + gain * V(w)||^2`` where
    ``V(w)`` is the arm contrast of the centred, transformed columns ``Y``
    (p x m). Returns (mask, distance, attempts, fallback).
    """
    p, m = Y.shape
    Yc = Y - Y.mean(axis=1, keepdims=True)
    Yt32 = Yc.T.astype(np.float32)
    base32 = base.astype(np.float32)
    contrast = gain / (omega * (1 - omega) * m)

    def exact(mask):
        v = base + contrast * Yc[:, mask].sum(axis=1)
        return scale * float(v @ v)

    best_mask, best_M = None, math.inf
    tried = 0
    while tried < cap:
        b = min(chunk, cap - tried)
        masks = _draw_masks(rng, b, m, t)
        V = base32 + np.float32(contrast) * (masks.astype(np.float32) @ Yt32)
        M32 = np.float32(scale) * np.einsum("ij,ij->i", V, V)
        if math.isinf(a):
            return masks[0], exact(masks[0]), tried + 1, False
        margin = SCREEN_RTOL * a + SCREEN_ATOL * (1.0 + scale)
        for i in np.flatnonzero(M32 < a + margin):
            Mi = exact(masks[i])
            if Mi < a:
                return masks[i], Mi, tried + int(i) + 1, False
        lo = float(M32.min())
        for i in np.flatnonzero(M32 <= lo + SCREEN_RTOL * lo + SCREEN_ATOL * (1.0 + scale)):
            Mi = exact(masks[i])
            if Mi < best_M:
                best_mask, best_M = masks[i].copy(), Mi
        tried += b
    return best_mask, best_M, cap, True


class SequentialState:
    """Fixed assignments and accumulated imbalance after k groups.

    Homogeneous mode keeps the raw prefix mean difference D_{1:k};
    heterogeneous mode keeps ``sum_j sqrt(n_j) Z_j``.
    """

    def __init__(self, p: int, omega: float = 0.5, mode: Mode = Mode.HOMOGENEOUS):
        self.p = p
        self.omega = omega
        self.mode = Mode(mode)
        self.sizes: list[int] = []
        self.blocks: list[np.ndarray] = []
        self.assignments: list[np.ndarray] = []
        self.M_sequence: list[float] = []
        self.attempts: list[int] = []
        self.fallback_flags: list[bool] = []
        self.thresholds: list[float] = []
        self.d_prefix = np.zeros(p)
        self.z_accumulator = np.zeros(p)

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def M_prev(self) -> float:
        return self.M_sequence[-1] if self.M_sequence else 0.0

    def step(
        self,
        X_k: np.ndarray,
        s_k: int,
        rng: np.random.Generator,
        cap_multiplier: int = 10,
        cov: SpdMatrix | None = None,
        group_sizes: Sequence[int] | None = None,
    ) -> GroupDraw:
        """Rerandomize the next group and fix its assignment.

        ``cov`` is cov(X_{1:k}) in homogeneous mode or cov(X_k) in
        heterogeneous mode; it is computed when omitted.
        """
        X_k = np.asarray(X_k, dtype=float)
        if X_k.ndim != 2 or X_k.shape[0] != self.p:
            raise ShapeMismatch(f"group block must have {self.p} rows")
        m = X_k.shape[1]
        if m % 2:
            raise DomainError("a group must contain an even number of units")
        n_k = m // 2
        t = treated_count(m, self.omega)
        sizes = self.sizes + [n_k]
        n_cum = sum(sizes)
        n_prev = n_cum - n_k
        a = threshold(self.p, sizes, len(sizes), self.M_prev, s_k)
        w2 = self.omega * (1 - self.omega)

        if self.mode is Mode.HOMOGENEOUS:
            if cov is None:
                cov = sample_covariance(np.hstack(self.blocks + [X_k]))
            Y = cov.whiten(X_k)
            base = cov.whiten(self.d_prefix) * (n_prev / n_cum)
            gain = n_k / n_cum
            scale = 2.0 * n_cum * w2
        else:
            if cov is None:
                cov = sample_covariance(X_k)
            Y = cov.inv_sqrt @ X_k
            base = self.z_accumulator
            gain = math.sqrt(n_k) * math.sqrt(m * w2)
            scale = 1.0 / n_cum

        cap = cap_multiplier * s_k
        mask, M, tried, fell_back = _rerandomize(
            Y, base, gain, scale, self.omega, t, a, cap, _chunk_size(s_k, cap), rng
        )
        W = mask.astype(np.int8)
        diff = X_k[:, mask].mean(axis=1) - X_k[:, ~mask].mean(axis=1)
        self.d_prefix = (n_prev * self.d_prefix + n_k * diff) / n_cum
        if self.mode is Mode.HETEROGENEOUS:
            z = standardized_diff(X_k, W, self.omega, cov)
            self.z_accumulator = self.z_accumulator + math.sqrt(n_k) * z.z
        self.sizes.append(n_k)
        self.blocks.append(X_k)
        self.assignments.append(W)
        self.M_sequence.append(M)
        self.attempts.append(tried)
        self.fallback_flags.append(fell_back)
        self.thresholds.append(a)
        return GroupDraw(W, M, tried, fell_back, a)

    def outcome(self) -> "TrialOutcome":
        return TrialOutcome(
            assignments=np.concatenate(self.assignments),
            M_sequence=tuple(self.M_sequence),
            attempts=tuple(self.attempts),
            fallback_flags=tuple(self.fallback_flags),
            thresholds=tuple(self.thresholds),
        )


@dataclass(frozen=True, eq=False)
class TrialOutcome:
    assignments: np.ndarray = field(repr=False)
    M_sequence: tuple[float, ...]
    attempts: tuple[int, ...]
    fallback_flags: tuple[bool, ...]
    thresholds: tuple[float, ...] = ()

    @property
    def final_M(self) -> float:
        return self.M_sequence[-1]

    @property
    def any_fallback(self) -> bool:
        return any(self.fallback_flags)

    @property
    def total_attempts(self) -> int:
        return sum(self.attempts)


def run_sequential(dataset: CovariateDataset, plan: BudgetPlan, rng: np.random.Generator) -> TrialOutcome:
    """Sequentially rerandomize every group of ``dataset`` under ``plan``."""
    if plan.K != dataset.K:
        raise ShapeMismatch(f"plan has {plan.K} groups but the dataset has {dataset.K}")
    covs = dataset.covariances()
    state = SequentialState(dataset.p, dataset.omega, dataset.mode)
    for k in range(dataset.K):
        state.step(dataset.group(k), plan.per_group[k], rng, plan.cap_multiplier, covs[k])
    return state.outcome()


def run_complete(dataset: CovariateDataset, S: int, rng: np.random.Generator, cap_multiplier: int = 10) -> TrialOutcome:
    """One-shot rerandomization of all units with acceptance probability 1/S."""
    whole = dataset.regroup((sum(dataset.group_sizes),))
    return run_sequential(whole, BudgetPlan.explicit((S,), cap_multiplier), rng)


def recompute_M_sequence(dataset: CovariateDataset, assignments) -> list[float]:
    """Distances of every prefix recomputed from scratch."""
    W = np.asarray(assignments)
    out = []
    if dataset.mode is Mode.HOMOGENEOUS:
        for k in range(dataset.K):
            stop = dataset.bounds[k][1]
            out.append(mahalanobis_homogeneous(dataset.prefix(k), W[:stop], dataset.omega))
    else:
        zs = []
        for k in range(dataset.K):
            a, b = dataset.bounds[k]
            zs.append(standardized_diff(dataset.group(k), W[a:b], dataset.omega))
            out.append(mahalanobis_heterogeneous(zs[:-1], zs[-1], dataset.group_sizes))
    return out


# ---------------------------------------------------------------------------
# pairwise biased coin


def pairwise_walk(Y: np.ndarray, orders: np.ndarray, coins: np.ndarray, q: float) -> np.ndarray:
    """Vectorised pairwise procedure over a batch of unit orders.

    ``Y`` is the whitened p x 2N data, ``orders`` an (R, 2N) array of unit
    orders and ``coins`` an (R, N) array of uniforms. Returns an (R, 2N)
    0/1 array indexed by original unit.
    """
    R, n_units = orders.shape
    N = n_units // 2
    acc = np.zeros((R, Y.shape[0]))
    W = np.zeros((R, n_units), dtype=np.int8)
    rows = np.arange(R)
    for k in range(N):
        first = orders[:, 2 * k]
        second = orders[:, 2 * k + 1]
        d = (Y[:, first] - Y[:, second]).T
        plus = np.einsum("ij,ij->i", acc + d, acc + d)
        minus = np.einsum("ij,ij->i", acc - d, acc - d)
        better_plus = plus <= minus
        take_better = coins[:, k] < q
        choose_plus = better_plus == take_better
        sign = np.where(choose_plus, 1.0, -1.0)
        acc += sign[:, None] * d
        W[rows, first] = choose_plus
        W[rows, second] = ~choose_plus
    return W


def run_pairwise_qin(
    dataset: CovariateDataset,
    q: float,
    cov_known: SpdMatrix | None,
    rng: np.random.Generator,
    shuffle: bool = False,
) -> TrialOutcome:
    """Pairwise biased-coin assignment in the dataset's unit order.

    For the k-th pair both 1:1 assignments are scored by the distance of
    the first 2k units under the known full-data covariance; the smaller one
    is taken with probability ``q``. ``shuffle`` draws a fresh arrival order
    first.
    """
    if any(n != 1 for n in dataset.group_sizes):
        raise DomainError("pairwise procedure needs groups of exactly two units")
    if not 0.5 < q <= 1:
        raise DomainError("q must lie in (1/2, 1]")
    if dataset.omega != 0.5:
        raise DomainError("pairwise procedure assigns 1:1")
    if cov_known is None:
        cov_known = sample_covariance(dataset.data)
    Y = cov_known.whiten(dataset.data)
    n_units = dataset.n_units
    order = rng.permutation(n_units) if shuffle else np.arange(n_units)
    coins = rng.random(n_units // 2)
    W = pairwise_walk(Y, order[None, :], coins[None, :], q)[0]
    # record running distances in arrival order
    Wo = W[order].astype(float)
    Yo = Y[:, order]
    contrast = np.cumsum(Yo * (2 * Wo - 1), axis=1)[:, 1::2]
    k = np.arange(1, n_units // 2 + 1)
    M_seq = tuple(float(v) for v in np.sum(contrast**2, axis=0) / (2 * k))
    return TrialOutcome(
        assignments=W,
        M_sequence=M_seq,
        attempts=tuple([1] * (n_units // 2)),
        fallback_flags=tuple([False] * (n_units // 2)),
    )


# ---------------------------------------------------------------------------
# treatment effect estimation


def tau_hat(Y, W) -> float:
    """Difference in means ``Y^T (2W - 1) / N``."""
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W)
    if Y.shape != W.shape or Y.ndim != 1:
        raise ShapeMismatch("outcome and assignment vectors must have equal length")
    N = Y.shape[0] / 2
    if np.count_nonzero(W) != N:
        raise DomainError("difference in means requires a 1:1 assignment")
    return float(Y @ (2 * W.astype(float) - 1) / N)


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Control outcome ``beta0 + beta^T x_i + noise_i`` plus additive effect tau.

    ``noise`` holds residuals orthogonal to (1, X^T).
    """

    beta0: float
    beta: np.ndarray
    tau: float
    noise: np.ndarray

    @classmethod
    def from_control_outcomes(cls, X, y0, tau: float) -> "OutcomeModel":
        """Project observed control outcomes onto (1, X^T)."""
        X = np.asarray(X, dtype=float)
        y0 = np.asarray(y0, dtype=float)
        design = np.column_stack([np.ones(X.shape[1]), X.T])
        coef, *_ = np.linalg.lstsq(design, y0, rcond=None)
        resid = y0 - design @ coef
        return cls(float(coef[0]), coef[1:], float(tau), resid)

    @classmethod
    def synthetic(cls, X, beta, tau: float, r2: float, rng: np.random.Generator, beta0: float = 0.0):
        """Model whose control outcomes have in-sample R^2 exactly ``r2``."""
        X = np.asarray(X, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if not 0 <= r2 <= 1:
            raise DomainError("r2 must lie in [0, 1]")
        design = np.column_stack([np.ones(X.shape[1]), X.T])
        e = rng.standard_normal(X.shape[1])
        coef, *_ = np.linalg.lstsq(design, e, rcond=None)
        e = e - design @ coef
        signal_var = np.var(beta @ X)
        if r2 == 1:
            e = np.zeros_like(e)
        elif r2 > 0:
            e = e * math.sqrt(signal_var * (1 - r2) / r2 / np.var(e))
        else:
            beta = np.zeros_like(beta)
        return cls(float(beta0), beta, float(tau), e)

    def control(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.beta.shape[0] or X.shape[1] != self.noise.shape[0]:
            raise ShapeMismatch("outcome model does not match covariates")
        return self.beta0 + self.beta @ X + self.noise

    def r2(self, X) -> float:
        signal = self.beta @ np.asarray(X, dtype=float)
        return float(np.var(signal) / np.var(signal + self.noise))


def simulate_outcomes(model: OutcomeModel, X, W) -> np.ndarray:
    """Observed outcomes ``beta0 + beta^T X_i + tau W_i + e_i``."""
    W = np.asarray(W, dtype=float)
    y0 = model.control(X)
    if W.shape != y0.shape:
        raise ShapeMismatch("assignment length does not match the outcome model")
    return y0 + model.tau * W


def variance_reduction(nu: float, r2: float) -> float:
    """Relative reduction in var(tau_hat): ``(1 - nu) R^2``."""
    return (1.0 - nu) * r2
