"""Command-line entry point: ``seqrerand <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import re
import sys
from typing import Sequence

import numpy as np

from . import harness
from .budget import BudgetPlan, allocate, threshold
from .datagen import IngestionSchema, read_covariate_table
from .engine import SequentialState
from .errors import (
    DomainError,
    InfeasibleBudget,
    ParseError,
    RankDeficient,
    SchemaError,
    SeqRerandError,
    ShapeMismatch,
    UnderflowError,
)
from .linalg import CovariateDataset, Mode, sample_covariance

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_EQUAL = re.compile(r"^\s*(\d+)\s*x\s*equal\s*$", re.IGNORECASE)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _JoinWords(argparse.Action):
    """Accept "5x equal" as two shell words."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, " ".join(values))


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # help that already states its default keeps it as written
        if "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def parse_groups(text: str, n_units: int | None = None) -> tuple[int, ...]:
    """Per-group unit counts from "184,182,182" or "KxEqual".

    "KxEqual" splits ``n_units`` into K even-sized groups as evenly as
    possible, giving larger remainders to earlier groups; without
    ``n_units`` it returns K groups of two units (only ratios matter).
    """
    m = _EQUAL.match(text)
    if m:
        K = int(m.group(1))
        if K < 1:
            raise UsageError("group count must be positive")
        if n_units is None:
            return (2,) * K
        if n_units % 2:
            raise UsageError(f"{n_units} units cannot be split into 1:1 groups")
        N = n_units // 2
        if K > N:
            raise UsageError(f"cannot split {n_units} units into {K} groups")
        base, extra = divmod(N, K)
        return tuple(2 * (base + (1 if k < extra else 0)) for k in range(K))
    try:
        sizes = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse group sizes {text!r}") from None
    if not sizes or any(s <= 0 or s % 2 for s in sizes):
        raise UsageError("group sizes must be positive even unit counts")
    if n_units is not None and sum(sizes) != n_units:
        raise UsageError(f"groups cover {sum(sizes)} units but the data has {n_units}")
    return sizes


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _nested_list(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_int_list(part) for part in text.split(";") if part.strip())


def _default_workers() -> int:
    env = os.environ.get("SEQRERAND_WORKERS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _common(replicates_default: int | None) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None,
                   help="master seed (non-negative integer); required by stochastic commands")
    if replicates_default is not None:
        g.add_argument("--replicates", type=int, default=replicates_default,
                       help="number of Monte Carlo replicates")
    g.add_argument("--workers", type=int, default=_default_workers(),
                   help="worker processes (falls back to SEQRERAND_WORKERS); results do not depend on it")
    g.add_argument("--out", default=None, help="output file path; a .plot.csv companion is written beside it")
    g.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    g.add_argument("--quiet", action="store_true", help="suppress the stdout summary")
    return p


def _budget_flags(p: argparse.ArgumentParser, S_default: int = 2000):
    p.add_argument("--S", type=int, default=S_default, help="total expected number of randomizations")
    p.add_argument("--floor", type=int, default=None,
                   help="minimum s_k per group (default: 10 if S >= 2000, else min(10, S // 2K))")
    p.add_argument("--cap-multiplier", type=int, default=10,
                   help="attempt cap per group as a multiple of s_k")
    p.add_argument("--budget", type=_int_list, default=None,
                   help="explicit s vector, comma-separated (overrides the allocation)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqrerand", description=__doc__, formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    a = sub.add_parser("allocate", parents=[_common(None)], formatter_class=_Formatter,
                       help="split a randomization budget over groups")
    _budget_flags(a)
    a.add_argument("--p", type=int, required=True, help="number of covariates")
    a.add_argument("--groups", nargs="+", action=_JoinWords, required=True,
                   help='unit counts "184,182,182" or "KxEqual" (e.g. "5x equal")')

    t = sub.add_parser("run-trial", parents=[_common(None)], formatter_class=_Formatter,
                       help="sequentially rerandomize the rows of a covariate CSV")
    _budget_flags(t)
    t.add_argument("--data", required=True, help="covariate CSV with a header row; missing cells are imputed from the whole file")
    t.add_argument("--schema", required=True, help="JSON ingestion schema")
    t.add_argument("--groups", nargs="+", action=_JoinWords, required=True, help='unit counts per group or "KxEqual"')
    t.add_argument("--mode", choices=[m.value for m in Mode], default="homogeneous",
                   help="covariance model across groups")

    i = sub.add_parser("simulate-ideal", parents=[_common(100000)], formatter_class=_Formatter,
                       help="ideal-chain Monte Carlo over an S grid")
    _budget_flags(i)
    i.add_argument("--p", type=int, default=None, help="number of covariates (required without --config)")
    i.add_argument("--K", type=int, default=None, help="number of equal groups")
    i.add_argument("--groups", nargs="+", action=_JoinWords, default=None, help='unit counts per group or "KxEqual" (overrides --K)')
    i.add_argument("--S-grid", type=_int_list, default=None,
                   help="increasing comma-separated S values (overrides --S)")
    i.add_argument("--config", default=None, help="ExperimentConfig JSON (replaces the other flags)")

    c = sub.add_parser("simulate-covariates", parents=[_common(20000)], formatter_class=_Formatter,
                       help="complete vs sequential rerandomization on simulated covariates")
    _budget_flags(c)
    c.add_argument("--p", type=int, default=5, help="number of covariates")
    c.add_argument("--K", type=int, default=5, help="number of equal groups")
    c.add_argument("--unit-sizes", type=_int_list, default=(100,), help="per-group unit counts 2n_k to sweep")
    c.add_argument("--dist", default="normal",
                   help="comma-separated families: normal, exponential, chisq1, weibull, lognormal")
    c.add_argument("--mode", choices=[m.value for m in Mode], default="homogeneous",
                   help="covariance model across groups")
    c.add_argument("--config", default=None, help="ExperimentConfig JSON (replaces the other flags)")

    d = sub.add_parser("run-designs", parents=[_common(20000)], formatter_class=_Formatter,
                       help="sequential designs on a fixed dataset with resampled arrival order")
    _budget_flags(d)
    d.add_argument("--designs", type=_nested_list, default=None,
                   help='semicolon-separated unit-count lists, e.g. "548;184,182,182"')
    d.add_argument("--budgets", type=_nested_list, default=None,
                   help="semicolon-separated explicit s vectors, one per design")
    d.add_argument("--data", default=None, help="covariate CSV (default: built-in synthetic clinical table)")
    d.add_argument("--schema", default=None, help="JSON ingestion schema for --data")
    d.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic table and of imputation")
    d.add_argument("--ideal", action="store_true", help="use ideal chains with the same group sizes")
    d.add_argument("--config", default=None, help="ExperimentConfig JSON (replaces the other flags)")

    m = sub.add_parser("compare", parents=[_common(20000)], formatter_class=_Formatter,
                       help="pairwise biased-coin baseline against sequential designs")
    _budget_flags(m)
    m.add_argument("--q", type=_float_list, default=(1.0, 0.75, harness.Q_FAIR),
                   help="coin probabilities in (1/2, 1]")
    m.add_argument("--designs", type=_nested_list, default=None,
                   help="sequential designs to include, as for run-designs")
    m.add_argument("--budgets", type=_nested_list, default=None, help="explicit s vectors per design")
    m.add_argument("--data", default=None, help="covariate CSV (default: built-in synthetic clinical table)")
    m.add_argument("--schema", default=None, help="JSON ingestion schema for --data")
    m.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic table and of imputation")
    m.add_argument("--config", default=None, help="ExperimentConfig JSON (replaces the other flags)")
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} is stochastic: --seed is required")
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")


def _plan_for(args, p: int, sizes: Sequence[int]) -> BudgetPlan:
    if args.budget is not None:
        if len(args.budget) != len(sizes):
            raise UsageError(f"--budget has {len(args.budget)} entries for {len(sizes)} groups")
        return BudgetPlan.explicit(args.budget, args.cap_multiplier)
    return allocate(args.S, p, sizes, args.floor, args.cap_multiplier)


def cmd_allocate(args, out) -> int:
    sizes = tuple(u // 2 for u in parse_groups(args.groups))
    plan = _plan_for(args, args.p, sizes)
    out.write(",".join(str(s) for s in plan.per_group) + "\n")
    a = [threshold(args.p, sizes, k + 1, 0.0, s) for k, s in enumerate(plan.per_group)]
    out.write("a_1=" + repr(a[0]) + "\n")
    if not args.quiet:
        out.write("thresholds at zero prior imbalance: " + ",".join(f"{x:.6g}" for x in a) + "\n")
    return EXIT_OK


def cmd_run_trial(args, out) -> int:
    _require_seed(args)
    schema = IngestionSchema.load(args.schema)
    rng = np.random.default_rng(args.seed)
    table = read_covariate_table(args.data, schema, rng)
    units = parse_groups(args.groups, table.shape[0])
    sizes = tuple(u // 2 for u in units)
    full = CovariateDataset(table.T, sizes, 0.5, Mode(args.mode), schema.names)
    plan = _plan_for(args, full.p, sizes)
    state = SequentialState(full.p, 0.5, full.mode)
    out.write(f"budget {','.join(str(s) for s in plan.per_group)}\n")
    for k in range(full.K):
        block = full.group(k)
        data = full.prefix(k) if full.mode is Mode.HOMOGENEOUS else block
        try:
            cov = sample_covariance(data)
        except RankDeficient as exc:
            name = full.column_name(exc.column)
            raise RankDeficient(
                f"covariance of group {k + 1} is rank deficient at column {name!r}", column=exc.column
            ) from None
        draw = state.step(block, plan.per_group[k], rng, plan.cap_multiplier, cov)
        flag = " fallback" if draw.fallback else ""
        out.write(
            f"group {k + 1}: M={draw.M:.6g} a={draw.threshold:.6g} attempts={draw.attempts}{flag}\n"
            f"assignment {''.join(str(int(x)) for x in draw.assignment)}\n"
        )
        out.flush()
    out.write(f"final M={state.M_prev!r}\n")
    return EXIT_OK


def _load_dataset(args):
    if args.data is None:
        return None
    if args.schema is None:
        raise UsageError("--data requires --schema")
    schema = IngestionSchema.load(args.schema)
    table = read_covariate_table(args.data, schema, np.random.default_rng(args.data_seed))
    if table.shape[0] % 2:
        raise SchemaError("an even number of rows is required")
    return CovariateDataset(table.T, (table.shape[0] // 2,), names=schema.names)


def _config(args, **fields) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = harness.ExperimentConfig.load(args.config)
        return dataclasses.replace(cfg, workers=args.workers)
    _require_seed(args)
    return harness.ExperimentConfig(
        replicates=args.replicates, master_seed=args.seed, workers=args.workers,
        floor=args.floor, cap_multiplier=args.cap_multiplier, **fields,
    )


def _emit(report, args, out) -> int:
    if args.out:
        harness.emit_report(report, args.format, args.out)
        if not args.quiet:
            out.write(harness.report_csv(report))
    else:
        text = harness.report_csv(report) if args.format == "csv" else harness.report_json(report)
        out.write(text)
    return EXIT_OK


def cmd_simulate_ideal(args, out) -> int:
    if args.p is None and not args.config:
        raise UsageError("--p is required")
    if args.groups:
        sizes = tuple(u // 2 for u in parse_groups(args.groups))
    elif args.K:
        sizes = (1,) * args.K
    elif not args.config:
        raise UsageError("give --K or --groups")
    else:
        sizes = ()
    grid = args.S_grid or (args.S,)
    budgets = (tuple(args.budget),) * len(grid) if args.budget else ()
    cfg = _config(args, kind="ideal_sweep", p=args.p, K=len(sizes) or 1, S=args.S,
                  S_grid=grid, group_sizes=sizes, budgets=budgets)
    return _emit(harness.experiment_ideal_sweep(cfg), args, out)


def cmd_simulate_covariates(args, out) -> int:
    dists = tuple(s.strip() for s in args.dist.split(","))
    cells = len(args.unit_sizes) * len(dists)
    budgets = (tuple(args.budget),) * cells if args.budget else ()
    cfg = _config(args, kind="simulated_covariates", p=args.p, K=args.K, S=args.S,
                  unit_sizes=args.unit_sizes, distributions=dists, budgets=budgets, mode=args.mode)
    return _emit(harness.experiment_simulated(cfg), args, out)


def _designs_default(dataset):
    n = 548 if dataset is None else dataset.n_units
    return ((n,),)


def cmd_run_designs(args, out) -> int:
    dataset = _load_dataset(args)
    designs = args.designs or _designs_default(dataset)
    cfg = _config(args, kind="dataset_designs", S=args.S, designs=designs,
                  budgets=args.budgets or (), ideal=args.ideal, data_seed=args.data_seed)
    return _emit(harness.experiment_designs(cfg, dataset), args, out)


def cmd_compare(args, out) -> int:
    dataset = _load_dataset(args)
    cfg = _config(args, kind="method_comparison", S=args.S, q_values=args.q,
                  designs=args.designs or (), budgets=args.budgets or (), data_seed=args.data_seed)
    return _emit(harness.experiment_compare(cfg, dataset), args, out)


COMMANDS = {
    "allocate": cmd_allocate,
    "run-trial": cmd_run_trial,
    "simulate-ideal": cmd_simulate_ideal,
    "simulate-covariates": cmd_simulate_covariates,
    "run-designs": cmd_run_designs,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"seqrerand: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnderflowError as exc:
        print(f"seqrerand: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, SchemaError, InfeasibleBudget, RankDeficient, ShapeMismatch, DomainError) as exc:
        print(f"seqrerand: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SeqRerandError as exc:
        print(f"seqrerand: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"seqrerand: cannot access file: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
