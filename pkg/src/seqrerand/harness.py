"""Monte Carlo experiments, aggregation and report output.

Replicate ``r`` always draws from ``SeedSequence(master_seed, spawn_key=(r,))``
and results are reduced in replicate order, so a report depends only on the
configuration and seed, never on how many workers ran it.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .budget import BudgetPlan, allocate, complete_threshold
from .datagen import (
    CovariateDistribution,
    gen_covariates,
    sample_ideal_chain_batch,
    surrogate_ucec,
)
from .distributions import chi2_cdf
from .engine import pairwise_walk, run_complete, run_sequential
from .errors import DomainError, RankDeficient, SchemaError
from .linalg import CovariateDataset, Mode, sample_covariance

CHUNK = 500
MIN_REPLICATES = 100
# q just above 1/2 stands in for a fair coin
Q_FAIR = 0.5 + 1e-6


class ExperimentKind(enum.Enum):
    IDEAL_SWEEP = "ideal_sweep"
    SIMULATED_COVARIATES = "simulated_covariates"
    DATASET_DESIGNS = "dataset_designs"
    METHOD_COMPARISON = "method_comparison"


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment family and every parameter that affects its output.

    ``unit_sizes`` lists per-group unit counts 2n_k for the simulated
    family; ``designs`` lists unit-count partitions of the dataset;
    ``budgets`` optionally pins explicit s vectors (one per cell or
    design) instead of deriving them. ``workers`` only affects speed.
    """

    kind: ExperimentKind
    p: int = 5
    K: int = 5
    S: int | None = 2000
    S_grid: tuple[int, ...] = ()
    group_sizes: tuple[int, ...] = ()
    unit_sizes: tuple[int, ...] = ()
    distributions: tuple[str, ...] = ()
    designs: tuple[tuple[int, ...], ...] = ()
    budgets: tuple[tuple[int, ...], ...] = ()
    q_values: tuple[float, ...] = ()
    ideal: bool = False
    replicates: int = 20000
    master_seed: int = 0
    floor: int | None = None
    cap_multiplier: int = 10
    mode: str = "homogeneous"
    data_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        for name in ("S_grid", "group_sizes", "unit_sizes", "distributions", "q_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "designs", tuple(tuple(int(x) for x in d) for d in self.designs))
        object.__setattr__(self, "budgets", tuple(tuple(int(x) for x in b) for b in self.budgets))
        if self.replicates < MIN_REPLICATES:
            raise SchemaError(f"replicates must be at least {MIN_REPLICATES}")
        if any(b <= a for a, b in zip(self.S_grid, self.S_grid[1:])):
            raise SchemaError("S grid must be strictly increasing")
        if self.p < 1 or self.K < 1:
            raise SchemaError("p and K must be positive")
        if self.master_seed < 0:
            raise SchemaError("seed must be non-negative")
        if self.workers < 1:
            raise SchemaError("workers must be positive")
        Mode(self.mode)
        for q in self.q_values:
            if not 0.5 < q <= 1:
                raise SchemaError("every q must lie in (1/2, 1]")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kind"] = self.kind.value
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise SchemaError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None

    def config_hash(self) -> str:
        """SHA-256 of every field except ``workers``."""
        doc = self.to_dict()
        doc.pop("workers")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


REPORT_COLUMNS = (
    "label", "p", "K", "S", "E_M", "SE_M", "E_MK", "SE_MK", "ratio",
    "fallback_rate", "attempts_mean", "replicates", "E_MK_strict",
)


@dataclass(frozen=True)
class ReportRow:
    label: str
    p: int
    K: int
    S: int | None
    E_M: float | None
    SE_M: float | None
    E_MK: float
    SE_MK: float
    fallback_rate: float
    attempts_mean: float
    replicates: int
    E_MK_strict: float | None = None

    @property
    def ratio(self) -> float | None:
        if self.E_M is None or self.E_MK == 0:
            return None
        return self.E_M / self.E_MK

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ratio"] = self.ratio
        return {k: out[k] for k in REPORT_COLUMNS}


@dataclass(frozen=True)
class MonteCarloReport:
    kind: str
    rows: tuple[ReportRow, ...]
    provenance: dict = field(default_factory=dict)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "provenance": dict(self.provenance),
            "rows": [r.as_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MonteCarloReport":
        rows = []
        for r in doc["rows"]:
            r = dict(r)
            r.pop("ratio", None)
            rows.append(ReportRow(**r))
        return cls(doc["kind"], tuple(rows), dict(doc["provenance"]))


# ---------------------------------------------------------------------------
# replicate scheduling


def replicate_rng(master_seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(r,)))


def _chunks(n: int) -> list[tuple[int, int]]:
    return [(a, min(a + CHUNK, n)) for a in range(0, n, CHUNK)]


def run_replicates(task: Callable, args: tuple, replicates: int, master_seed: int, workers: int = 1) -> np.ndarray:
    """Evaluate ``task(start, stop, master_seed, *args)`` over fixed chunks.

    Each call returns a 2-D array with one row per replicate; the rows are
    stacked in replicate order whatever the worker count.
    """
    spans = _chunks(replicates)
    calls = [(task, a, b, master_seed, args) for a, b in spans]
    if workers <= 1 or len(spans) == 1:
        parts = [_invoke(c) for c in calls]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(spans))) as pool:
            parts = list(pool.map(_invoke, calls))
    return np.vstack(parts)


def _invoke(call):
    task, a, b, seed, args = call
    return task(a, b, seed, *args)


def mean_se(values) -> tuple[float, float]:
    """Compensated mean and standard error (sample SD / sqrt(n))."""
    x = np.asarray(values, dtype=float)
    n = x.size
    mean = math.fsum(x) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _strict_mean(values) -> float | None:
    values = np.asarray(values, dtype=float)
    return math.fsum(values) / values.size if values.size else None


def analytic_complete_mean(p: int, S: int) -> float:
    """``p S F_{chi2_{p+2}}(a)`` with ``a`` the 1/S quantile of chi2_p."""
    if S == 1:
        return float(p)
    a = complete_threshold(p, S)
    return p * S * float(chi2_cdf(a, p + 2))


def _plan(config: ExperimentConfig, S: int, p: int, sizes, index: int) -> BudgetPlan:
    if config.budgets:
        return BudgetPlan.explicit(config.budgets[index], config.cap_multiplier)
    return allocate(S, p, sizes, config.floor, config.cap_multiplier)


def _provenance(config: ExperimentConfig) -> dict:
    return {
        "config_hash": config.config_hash(),
        "seed": config.master_seed,
        "replicates": config.replicates,
    }


# ---------------------------------------------------------------------------
# replicate tasks (module level so worker processes can import them)


def _ideal_task(a, b, seed, p, sizes, plan):
    u = np.vstack([replicate_rng(seed, r).random(len(sizes)) for r in range(a, b)])
    return sample_ideal_chain_batch(p, sizes, plan, u)


def _simulated_task(a, b, seed, p, unit_size, K, dist, S, plan, mode):
    out = np.empty((b - a, 6))
    dist = CovariateDistribution(dist)
    for i, r in enumerate(range(a, b)):
        rng = replicate_rng(seed, r)
        X = gen_covariates(unit_size * K, p, dist, rng)
        ds = CovariateDataset(X, (unit_size // 2,) * K, 0.5, mode)
        full = run_complete(ds, S, rng, plan.cap_multiplier)
        seq = run_sequential(ds, plan, rng)
        out[i] = (
            full.final_M, full.any_fallback, full.total_attempts,
            seq.final_M, seq.any_fallback, seq.total_attempts,
        )
    return out


def _designs_task(a, b, seed, dataset, plan):
    out = np.empty((b - a, 3))
    for i, r in enumerate(range(a, b)):
        rng = replicate_rng(seed, r)
        while True:
            ds = dataset.permuted(rng.permutation(dataset.n_units))
            try:
                ds.covariances()
            except RankDeficient:
                # an early group lacks a rare binary level; draw a new order
                continue
            break
        res = run_sequential(ds, plan, rng)
        out[i] = (res.final_M, res.any_fallback, res.total_attempts)
    return out


def _qin_task(a, b, seed, Y, q):
    n_units = Y.shape[1]
    orders = np.empty((b - a, n_units), dtype=np.intp)
    coins = np.empty((b - a, n_units // 2))
    for i, r in enumerate(range(a, b)):
        rng = replicate_rng(seed, r)
        orders[i] = rng.permutation(n_units)
        coins[i] = rng.random(n_units // 2)
    W = pairwise_walk(Y, orders, coins, q)
    D = (Y @ (2.0 * W - 1).T) * (2.0 / n_units)
    M = (n_units / 4.0) * np.sum(D * D, axis=0)
    return M[:, None]


# ---------------------------------------------------------------------------
# experiments


def experiment_ideal_sweep(config: ExperimentConfig) -> MonteCarloReport:
    """Analytic E(M) against Monte Carlo E(M_K) from ideal chains, per S."""
    if config.kind is not ExperimentKind.IDEAL_SWEEP:
        raise DomainError("config is not an ideal sweep")
    grid = config.S_grid or (config.S,)
    sizes = config.group_sizes or (1,) * config.K
    rows = []
    for i, S in enumerate(grid):
        plan = _plan(config, S, config.p, sizes, i)
        M = run_replicates(_ideal_task, (config.p, sizes, plan), config.replicates,
                           config.master_seed, config.workers)
        E_MK, SE_MK = mean_se(M[:, -1])
        rows.append(ReportRow(
            label=f"p={config.p},K={len(sizes)},S={S}",
            p=config.p, K=len(sizes), S=S,
            E_M=analytic_complete_mean(config.p, S), SE_M=0.0,
            E_MK=E_MK, SE_MK=SE_MK, fallback_rate=0.0,
            attempts_mean=float(S), replicates=config.replicates, E_MK_strict=E_MK,
        ))
    return MonteCarloReport(config.kind.value, tuple(rows), _provenance(config))


def experiment_simulated(config: ExperimentConfig) -> MonteCarloReport:
    """Complete versus sequential rerandomization on regenerated covariates."""
    if config.kind is not ExperimentKind.SIMULATED_COVARIATES:
        raise DomainError("config is not a simulated-covariates experiment")
    rows = []
    cell = 0
    dists = config.distributions or ("normal",)
    for unit_size in config.unit_sizes or (100,):
        if unit_size % 2:
            raise SchemaError("per-group unit counts must be even")
        for name in dists:
            dist = CovariateDistribution.parse(name)
            sizes = (unit_size // 2,) * config.K
            plan = _plan(config, config.S, config.p, sizes, cell)
            out = run_replicates(
                _simulated_task,
                (config.p, unit_size, config.K, dist.value, config.S, plan, Mode(config.mode)),
                config.replicates, config.master_seed + cell, config.workers,
            )
            E_M, SE_M = mean_se(out[:, 0])
            E_MK, SE_MK = mean_se(out[:, 3])
            ok = out[:, 4] == 0
            rows.append(ReportRow(
                label=f"{dist.value},2n_k={unit_size}",
                p=config.p, K=config.K, S=config.S,
                E_M=E_M, SE_M=SE_M, E_MK=E_MK, SE_MK=SE_MK,
                fallback_rate=float(np.mean(out[:, 4])),
                attempts_mean=mean_se(out[:, 5])[0],
                replicates=config.replicates,
                E_MK_strict=_strict_mean(out[ok, 3]),
            ))
            cell += 1
    return MonteCarloReport(config.kind.value, tuple(rows), _provenance(config))


def _design_label(sizes: Sequence[int]) -> str:
    return "+".join(str(s) for s in sizes)


def experiment_designs(config: ExperimentConfig, dataset: CovariateDataset | None = None) -> MonteCarloReport:
    """Sequential designs on a fixed dataset with a fresh arrival order per replicate.

    A single-group design is complete rerandomization. With ``config.ideal``
    the rows come from ideal chains with the same group sizes instead.
    """
    if config.kind is not ExperimentKind.DATASET_DESIGNS:
        raise DomainError("config is not a designs experiment")
    if dataset is None:
        dataset = surrogate_ucec(np.random.default_rng(config.data_seed), Mode(config.mode))
    p = dataset.p
    rows = []
    for i, units in enumerate(config.designs):
        if sum(units) != dataset.n_units or any(u % 2 for u in units):
            raise SchemaError(f"design {units} does not partition {dataset.n_units} units into even groups")
        sizes = tuple(u // 2 for u in units)
        plan = _plan(config, config.S, p, sizes, i)
        if config.ideal:
            M = run_replicates(_ideal_task, (p, sizes, plan), config.replicates,
                               config.master_seed + i, config.workers)
            final, fallback, attempts = M[:, -1], np.zeros(len(M)), np.full(len(M), float(config.S))
        else:
            ds = dataset.regroup(sizes)
            out = run_replicates(_designs_task, (ds, plan), config.replicates,
                                 config.master_seed + i, config.workers)
            final, fallback, attempts = out[:, 0], out[:, 1], out[:, 2]
        E_MK, SE_MK = mean_se(final)
        ok = fallback == 0
        rows.append(ReportRow(
            label=_design_label(units), p=p, K=len(sizes), S=config.S,
            E_M=analytic_complete_mean(p, config.S), SE_M=0.0,
            E_MK=E_MK, SE_MK=SE_MK,
            fallback_rate=float(np.mean(fallback)),
            attempts_mean=mean_se(attempts)[0],
            replicates=config.replicates,
            E_MK_strict=_strict_mean(final[ok]),
        ))
    return MonteCarloReport(config.kind.value, tuple(rows), _provenance(config))


def experiment_compare(config: ExperimentConfig, dataset: CovariateDataset | None = None) -> MonteCarloReport:
    """Pairwise biased-coin assignment for each q, plus the listed designs.

    The pairwise rows use the full-data covariance as known and a fresh
    arrival order per replicate.
    """
    if config.kind is not ExperimentKind.METHOD_COMPARISON:
        raise DomainError("config is not a method comparison")
    if dataset is None:
        dataset = surrogate_ucec(np.random.default_rng(config.data_seed), Mode(config.mode))
    Y = sample_covariance(dataset.data).whiten(dataset.data)
    Y = Y - Y.mean(axis=1, keepdims=True)
    rows = []
    for i, q in enumerate(config.q_values or (1.0, 0.75, Q_FAIR)):
        M = run_replicates(_qin_task, (Y, float(q)), config.replicates,
                           config.master_seed + i, config.workers)[:, 0]
        E_MK, SE_MK = mean_se(M)
        rows.append(ReportRow(
            label=f"pairwise,q={q:g}", p=dataset.p, K=dataset.n_units // 2, S=None,
            E_M=None, SE_M=None, E_MK=E_MK, SE_MK=SE_MK,
            fallback_rate=0.0, attempts_mean=1.0, replicates=config.replicates,
            E_MK_strict=E_MK,
        ))
    if config.designs:
        sub = dataclasses.replace(config, kind=ExperimentKind.DATASET_DESIGNS,
                                  master_seed=config.master_seed + len(rows))
        rows.extend(experiment_designs(sub, dataset).rows)
    return MonteCarloReport(config.kind.value, tuple(rows), _provenance(config))


def run_experiment(config: ExperimentConfig) -> MonteCarloReport:
    runners = {
        ExperimentKind.IDEAL_SWEEP: experiment_ideal_sweep,
        ExperimentKind.SIMULATED_COVARIATES: experiment_simulated,
        ExperimentKind.DATASET_DESIGNS: experiment_designs,
        ExperimentKind.METHOD_COMPARISON: experiment_compare,
    }
    return runners[config.kind](config)


# ---------------------------------------------------------------------------
# output


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_csv(report: MonteCarloReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        d = row.as_dict()
        writer.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(report: MonteCarloReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def plot_data_csv(report: MonteCarloReport) -> str:
    """Long-format series: one line per (series, S) point."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("series", "S", "E_M", "E_MK", "SE_MK", "ratio"))
    for row in report.rows:
        series = f"p={row.p},K={row.K}" if report.kind == ExperimentKind.IDEAL_SWEEP.value else row.label
        writer.writerow([series, _fmt(row.S), _fmt(row.E_M), _fmt(row.E_MK), _fmt(row.SE_MK), _fmt(row.ratio)])
    return buf.getvalue()


def plot_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".plot.csv")


def emit_report(report: MonteCarloReport, fmt: str, path) -> tuple[Path, Path]:
    """Write the report as csv or json plus a plot-data CSV beside it."""
    path = Path(path)
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise DomainError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    companion = plot_path(path)
    companion.write_text(plot_data_csv(report), encoding="utf-8")
    return path, companion
