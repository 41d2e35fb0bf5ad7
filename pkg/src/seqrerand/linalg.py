"""Covariance estimation, Cholesky factors and Mahalanobis distances.

All quadratic forms go through a lower-triangular factor and a triangular
solve; no covariance matrix is ever inverted explicitly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError, RankDeficient, ShapeMismatch

PIVOT_RTOL = 1e-10
SYMMETRY_RTOL = 1e-12


class Mode(enum.Enum):
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with an explicit pivot check.

    Raises RankDeficient naming the first covariate whose pivot falls
    below ``PIVOT_RTOL`` times the largest diagonal entry.
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[0]
    scale = max(float(np.max(np.diag(a))), 0.0) if p else 0.0
    tol = PIVOT_RTOL * scale
    L = np.zeros_like(a)
    for j in range(p):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > tol:
            raise RankDeficient(
                f"covariance is not full rank: pivot {pivot:.3g} for covariate {j}",
                column=j,
            )
        L[j, j] = np.sqrt(pivot)
        if j + 1 < p:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


class SpdMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor."""

    def __init__(self, entries):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ShapeMismatch(f"expected a square matrix, got shape {entries.shape}")
        asym = np.max(np.abs(entries - entries.T)) if entries.size else 0.0
        if asym > SYMMETRY_RTOL * max(np.max(np.abs(entries)), 1e-300):
            raise DomainError("matrix is not symmetric")
        entries = (entries + entries.T) / 2
        entries.setflags(write=False)
        self.entries = entries
        factor = cholesky_lower(entries)
        factor.setflags(write=False)
        self.factor = factor

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} v`` for a vector or a (p, m) matrix."""
        return solve_triangular(self.factor, v, lower=True, check_finite=False)

    def quad_form(self, d: np.ndarray) -> float:
        """``d^T A^{-1} d`` via one triangular solve."""
        u = self.whiten(np.asarray(d, dtype=float))
        return float(u @ u)

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = self.whiten(b)
        return solve_triangular(self.factor.T, y, lower=False, check_finite=False)

    @cached_property
    def inv_sqrt(self) -> np.ndarray:
        """Symmetric inverse square root ``A^{-1/2}``."""
        w, v = np.linalg.eigh(self.entries)
        out = (v / np.sqrt(w)) @ v.T
        out.setflags(write=False)
        return out

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim})"


def sample_covariance(X) -> SpdMatrix:
    """Sample covariance of the columns of a p x m matrix (divisor m - 1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeMismatch("covariate matrix must be two-dimensional (p x m)")
    m = X.shape[1]
    if m < 2:
        raise DomainError("need at least two units to estimate a covariance")
    centered = X - X.mean(axis=1, keepdims=True)
    return SpdMatrix(centered @ centered.T / (m - 1))


def _check_assignment(X: np.ndarray, W, omega: float) -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 1 or W.shape[0] != X.shape[1]:
        raise ShapeMismatch(
            f"assignment of length {W.shape} does not match {X.shape[1]} units"
        )
    n_treat = omega * W.shape[0]
    if abs(n_treat - round(n_treat)) > 1e-9 or int(np.count_nonzero(W)) != round(n_treat):
        raise DomainError(
            f"assignment must contain exactly {n_treat:g} treated units"
        )
    return W.astype(bool)


def mean_difference(X, W, omega: float = 0.5) -> np.ndarray:
    """Treatment mean minus control mean for every covariate."""
    X = np.asarray(X, dtype=float)
    W = _check_assignment(X, W, omega)
    return X[:, W].mean(axis=1) - X[:, ~W].mean(axis=1)


def mahalanobis_homogeneous(X, W, omega: float = 0.5, cov: SpdMatrix | None = None) -> float:
    """Mahalanobis distance between arms over all columns of ``X``.

    Returns ``m omega (1 - omega) D^T cov^{-1} D`` for ``m = 2n`` units; with
    ``omega = 1/2`` this is ``(n/2) D^T cov^{-1} D``. ``cov`` defaults to the
    sample covariance of ``X`` and should be passed when it is reused.
    """
    X = np.asarray(X, dtype=float)
    if cov is None:
        cov = sample_covariance(X)
    if cov.dim != X.shape[0]:
        raise ShapeMismatch("covariance dimension does not match covariates")
    d = mean_difference(X, W, omega)
    return X.shape[1] * omega * (1 - omega) * cov.quad_form(d)


@dataclass(frozen=True, eq=False)
class StandardizedDiff:
    """Group-level covariate difference scaled to identity covariance."""

    z: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise DomainError("standardized difference must be a finite vector")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def squared_norm(self) -> float:
        return float(self.z @ self.z)


def standardized_diff(X, W, omega: float = 0.5, cov: SpdMatrix | None = None) -> StandardizedDiff:
    """``{2n omega (1 - omega)}^{1/2} cov^{-1/2} D`` for a group of 2n units."""
    X = np.asarray(X, dtype=float)
    if cov is None:
        cov = sample_covariance(X)
    d = mean_difference(X, W, omega)
    scale = np.sqrt(X.shape[1] * omega * (1 - omega))
    return StandardizedDiff(scale * (cov.inv_sqrt @ d))


def mahalanobis_heterogeneous(
    previous: Sequence[StandardizedDiff],
    current: StandardizedDiff,
    group_sizes: Sequence[int],
) -> float:
    """Distance of the first k groups from per-group standardized differences.

    ``group_sizes`` holds n_1..n_k (half the unit counts, or the first k
    entries of a longer list); ``current`` fills the k-th slot.
    """
    zs = list(previous) + [current]
    k = len(zs)
    if len(group_sizes) < k:
        raise ShapeMismatch("fewer group sizes than standardized differences")
    p = current.z.shape[0]
    acc = np.zeros(p)
    for n_j, zj in zip(group_sizes[:k], zs):
        if zj.z.shape != (p,):
            raise ShapeMismatch("standardized differences have different lengths")
        acc += np.sqrt(n_j) * zj.z
    return float(acc @ acc) / float(sum(group_sizes[:k]))


@dataclass(frozen=True, eq=False)
class CovariateDataset:
    """Fixed p x 2N covariate matrix split into K sequential groups.

    ``group_sizes`` holds n_1..n_K; group k owns ``2 n_k`` consecutive
    columns. ``omega`` is the treated fraction used in every group.
    """

    data: np.ndarray = field(repr=False)
    group_sizes: tuple[int, ...]
    omega: float = 0.5
    mode: Mode = Mode.HOMOGENEOUS
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise ShapeMismatch("covariate matrix must be p x 2N")
        if not np.all(np.isfinite(data)):
            raise DomainError("covariate matrix contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        sizes = tuple(int(n) for n in self.group_sizes)
        if not sizes or any(n <= 0 for n in sizes):
            raise DomainError("group sizes must be positive integers")
        if 2 * sum(sizes) != data.shape[1]:
            raise ShapeMismatch(
                f"groups cover {2 * sum(sizes)} units but the data has {data.shape[1]}"
            )
        object.__setattr__(self, "group_sizes", sizes)
        if not 0 < self.omega < 1:
            raise DomainError("omega must lie in (0, 1)")
        for n in sizes:
            t = self.omega * 2 * n
            if abs(t - round(t)) > 1e-9 or round(t) < 1 or round(t) >= 2 * n:
                raise DomainError(f"omega * {2 * n} is not a feasible treated count")
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != data.shape[0]:
                raise ShapeMismatch("one name per covariate required")
            object.__setattr__(self, "names", names)

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def K(self) -> int:
        return len(self.group_sizes)

    @property
    def n_units(self) -> int:
        return self.data.shape[1]

    @cached_property
    def bounds(self) -> tuple[tuple[int, int], ...]:
        """Column ranges [start, stop) of every group."""
        edges = np.concatenate([[0], np.cumsum([2 * n for n in self.group_sizes])])
        return tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))

    def group(self, k: int) -> np.ndarray:
        """Columns of group k (0-based)."""
        a, b = self.bounds[k]
        return self.data[:, a:b]

    def prefix(self, k: int) -> np.ndarray:
        """Columns of groups 0..k inclusive."""
        return self.data[:, : self.bounds[k][1]]

    @cached_property
    def prefix_covariances(self) -> tuple[SpdMatrix, ...]:
        """cov(X_{1:k}) for every k, factorized once."""
        return tuple(sample_covariance(self.prefix(k)) for k in range(self.K))

    @cached_property
    def group_covariances(self) -> tuple[SpdMatrix, ...]:
        """cov(X_k) for every k, factorized once."""
        return tuple(sample_covariance(self.group(k)) for k in range(self.K))

    def covariances(self) -> tuple[SpdMatrix, ...]:
        if self.mode is Mode.HOMOGENEOUS:
            return self.prefix_covariances
        return self.group_covariances

    def column_name(self, j: int) -> str:
        if self.names is not None:
            return self.names[j]
        return f"covariate {j}"

    def regroup(self, group_sizes, omega=None, mode=None) -> "CovariateDataset":
        return CovariateDataset(
            self.data,
            tuple(group_sizes),
            self.omega if omega is None else omega,
            self.mode if mode is None else mode,
            self.names,
        )

    def permuted(self, order) -> "CovariateDataset":
        """Same dataset with units re-ordered (a new arrival order)."""
        return CovariateDataset(
            self.data[:, np.asarray(order)], self.group_sizes, self.omega, self.mode, self.names
        )
