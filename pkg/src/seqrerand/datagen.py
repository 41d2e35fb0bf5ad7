"""Ideal chains, synthetic covariates and CSV ingestion."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .budget import BudgetPlan
from .distributions import nc_chi2_quantile
from .errors import (
    AllMissingColumn,
    DomainError,
    ParseError,
    RankDeficient,
    SchemaError,
    ShapeMismatch,
)
from .linalg import CovariateDataset, Mode, sample_covariance


class CovariateDistribution(enum.Enum):
    """Entry distributions for synthetic covariates, by increasing tail weight."""

    STD_NORMAL = "normal"
    EXPONENTIAL = "exponential"
    CHI_SQUARED_1 = "chisq1"
    WEIBULL = "weibull"
    LOG_NORMAL = "lognormal"

    @property
    def excess_kurtosis(self) -> float:
        return EXCESS_KURTOSIS[self]

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self is CovariateDistribution.STD_NORMAL:
            return rng.standard_normal(shape)
        if self is CovariateDistribution.EXPONENTIAL:
            return rng.standard_exponential(shape)
        if self is CovariateDistribution.CHI_SQUARED_1:
            return rng.standard_normal(shape) ** 2
        if self is CovariateDistribution.WEIBULL:
            return rng.weibull(WEIBULL_SHAPE, shape)
        return np.exp(rng.standard_normal(shape))

    @classmethod
    def parse(cls, name: str) -> "CovariateDistribution":
        key = name.strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key in (member.value, member.name.lower().replace("_", "")):
                return member
        raise DomainError(f"unknown distribution {name!r}")


WEIBULL_SHAPE = 0.6


def _weibull_excess_kurtosis(k: float) -> float:
    g = [math.gamma(1 + i / k) for i in range(5)]
    var = g[2] - g[1] ** 2
    m4 = g[4] - 4 * g[3] * g[1] + 6 * g[2] * g[1] ** 2 - 3 * g[1] ** 4
    return m4 / var**2 - 3


EXCESS_KURTOSIS = {
    CovariateDistribution.STD_NORMAL: 0.0,
    CovariateDistribution.EXPONENTIAL: 6.0,
    CovariateDistribution.CHI_SQUARED_1: 12.0,
    CovariateDistribution.WEIBULL: _weibull_excess_kurtosis(WEIBULL_SHAPE),
    CovariateDistribution.LOG_NORMAL: math.exp(4) + 2 * math.exp(3) + 3 * math.exp(2) - 6,
}


def gen_covariates(n_units: int, p: int, dist: CovariateDistribution, rng: np.random.Generator) -> np.ndarray:
    """p x n_units matrix of i.i.d. draws, used raw (no standardization)."""
    if p < 1 or n_units < p + 2:
        raise DomainError("need p >= 1 and at least p + 2 units")
    return CovariateDistribution(dist).draw(rng, (p, n_units))


# ---------------------------------------------------------------------------
# ideal chains


def sample_ideal_chain_batch(p: int, group_sizes: Sequence[int], plan: BudgetPlan, uniforms) -> np.ndarray:
    """Ideal chains driven by an (R, K) array of uniforms, one row per replicate.

    M_k is the inverse-CDF draw from ``(n_k / n_{1:k}) chi2_p(lam)`` truncated
    at its 1/s_k quantile, with ``lam = (n_{1:k} - n_k) M_{k-1} / n_k``.
    Returns an (R, K) array. Raises UnderflowError when some 1/s_k is
    below 1e-300.
    """
    u = np.atleast_2d(np.asarray(uniforms, dtype=float))
    K = len(group_sizes)
    if plan.K != K or u.shape[1] != K:
        raise ShapeMismatch("plan, group sizes and uniforms disagree on K")
    out = np.empty_like(u)
    M_prev = np.zeros(u.shape[0])
    n_cum = 0
    for k, (n_k, s_k) in enumerate(zip(group_sizes, plan.per_group)):
        n_cum += n_k
        lam = (n_cum - n_k) / n_k * M_prev
        # conditional quantile of u/s_k lies below the 1/s_k threshold;
        # a zero uniform is nudged to the smallest float64 grid step
        v = np.maximum(u[:, k], 2.0**-53) / s_k
        M_prev = n_k / n_cum * np.asarray(nc_chi2_quantile(v, p, lam), dtype=float).reshape(-1)
        out[:, k] = M_prev
    return out


def sample_ideal_chain(p: int, group_sizes: Sequence[int], plan: BudgetPlan, rng: np.random.Generator) -> tuple[float, ...]:
    """One draw of (M_1, ..., M_K) from the conditional chi-squared laws."""
    row = sample_ideal_chain_batch(p, group_sizes, plan, rng.random((1, len(group_sizes))))
    return tuple(float(x) for x in row[0])


# ---------------------------------------------------------------------------
# CSV ingestion


class ColumnKind(enum.Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: ColumnKind
    mapping: dict | None = None
    missing_token: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ColumnKind(self.kind))
        if self.kind is ColumnKind.CATEGORICAL:
            if not self.mapping:
                raise SchemaError(f"categorical column {self.name!r} needs a map")
            values = set(self.mapping.values())
            if values != {0, 1}:
                raise SchemaError(f"map of column {self.name!r} must be onto {{0, 1}}")

    def is_missing(self, cell: str) -> bool:
        cell = cell.strip()
        return cell == "" or (self.missing_token is not None and cell == self.missing_token)

    def convert(self, cell: str, row: int) -> float:
        cell = cell.strip()
        if self.kind is ColumnKind.CATEGORICAL:
            try:
                return float(self.mapping[cell])
            except KeyError:
                raise ParseError(f"level {cell!r} is not in the map", row, self.name) from None
        try:
            value = float(cell)
        except ValueError:
            raise ParseError(f"cannot read {cell!r} as a number", row, self.name) from None
        if not math.isfinite(value):
            raise ParseError(f"non-finite value {cell!r}", row, self.name)
        return value


@dataclass(frozen=True)
class IngestionSchema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        if not self.columns:
            raise SchemaError("schema lists no columns")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @classmethod
    def from_dict(cls, doc) -> "IngestionSchema":
        if not isinstance(doc, dict) or not isinstance(doc.get("columns"), list):
            raise SchemaError("schema must be an object with a 'columns' list")
        specs = []
        for entry in doc["columns"]:
            if not isinstance(entry, dict) or "name" not in entry:
                raise SchemaError("every schema column needs a name")
            try:
                kind = ColumnKind(entry.get("kind", "continuous"))
            except ValueError:
                raise SchemaError(f"unknown kind {entry.get('kind')!r} for {entry['name']!r}") from None
            mapping = entry.get("map")
            if mapping is not None:
                if not isinstance(mapping, dict):
                    raise SchemaError(f"map of {entry['name']!r} must be an object")
                mapping = {str(k): v for k, v in mapping.items()}
            specs.append(ColumnSpec(str(entry["name"]), kind, mapping, entry.get("missing_token")))
        return cls(tuple(specs))

    @classmethod
    def load(cls, path) -> "IngestionSchema":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


def read_covariate_table(path, schema: IngestionSchema, rng: np.random.Generator) -> np.ndarray:
    """Parse, dichotomize and impute a CSV; returns an (rows, p) array.

    Rows are numbered from 2 in error messages (line 1 is the header).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", 1) from None
        except csv.Error as exc:
            raise ParseError(str(exc), 1) from None
        header = [h.strip() for h in header]
        index = {}
        for spec in schema.columns:
            if spec.name not in header:
                raise SchemaError(f"column {spec.name!r} is missing from the file")
            index[spec.name] = header.index(spec.name)
        values = [[] for _ in schema.columns]
        missing = [[] for _ in schema.columns]
        n_rows = 0
        line = 1
        try:
            for line, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} fields, found {len(row)}", line)
                for j, spec in enumerate(schema.columns):
                    cell = row[index[spec.name]]
                    if spec.is_missing(cell):
                        values[j].append(math.nan)
                        missing[j].append(n_rows)
                    else:
                        values[j].append(spec.convert(cell, line))
                n_rows += 1
        except csv.Error as exc:
            raise ParseError(str(exc), line + 1) from None
    table = np.array(values, dtype=float).T.reshape(n_rows, len(schema.columns))
    for j, spec in enumerate(schema.columns):
        holes = missing[j]
        if not holes:
            continue
        observed = table[~np.isnan(table[:, j]), j]
        if observed.size == 0:
            raise AllMissingColumn(f"column {spec.name!r} has no observed values")
        table[holes, j] = observed[rng.integers(0, observed.size, size=len(holes))]
    return table


def ingest_csv(
    path,
    schema: IngestionSchema,
    rng: np.random.Generator,
    group_sizes: Sequence[int] | None = None,
    omega: float = 0.5,
    mode: Mode = Mode.HOMOGENEOUS,
) -> CovariateDataset:
    """Load a covariate file as a p x 2N dataset (one group unless sizes given).

    Missing cells are replaced by uniform draws, with replacement, from the
    observed values of their column.
    """
    table = read_covariate_table(path, schema, rng)
    n_units = table.shape[0]
    if group_sizes is None:
        if n_units % 2:
            raise SchemaError(f"file has {n_units} rows; an even count is required")
        group_sizes = (n_units // 2,)
    return CovariateDataset(table.T, tuple(group_sizes), omega, mode, schema.names)


# ---------------------------------------------------------------------------
# surrogate clinical covariates

SURROGATE_UNITS = 548
SURROGATE_BINARY_FREQ = (0.5, 0.42, 0.35, 0.3, 0.22, 0.15, 0.09, 0.08)
SURROGATE_NAMES = (
    "age", "bmi", "tumor_purity", "mutation_count",
    "stage_advanced", "grade_high", "histology_serous", "menopause_post",
    "race_white", "diabetes", "radiation", "residual_tumor",
)


def surrogate_ucec(rng: np.random.Generator, mode: Mode = Mode.HOMOGENEOUS) -> CovariateDataset:
    """Synthetic stand-in for a 548-subject clinical covariate table.

    Twelve covariates: one bell-shaped and three skewed continuous columns,
    then eight binary columns, two of them with minor frequency below 0.1.
    Draws are repeated until the sample covariance is full rank.
    """
    m = SURROGATE_UNITS
    while True:
        cont = np.vstack([
            rng.normal(63.0, 11.0, m),
            np.exp(rng.normal(math.log(32.0), 0.25, m)),
            rng.beta(5.0, 2.0, m),
            np.exp(rng.normal(4.0, 1.4, m)),
        ])
        binary = np.vstack([(rng.random(m) < f).astype(float) for f in SURROGATE_BINARY_FREQ])
        data = np.vstack([cont, binary])
        freq = binary.mean(axis=1)
        minor = np.minimum(freq, 1 - freq)
        if np.count_nonzero(minor < 0.1) != 2 or np.any(minor == 0):
            continue
        try:
            sample_covariance(data)
        except RankDeficient:
            continue
        return CovariateDataset(data, (m // 2,), 0.5, mode, SURROGATE_NAMES)
