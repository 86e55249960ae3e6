"""Command-line interface: ``m2m <command> [options]``.

Every command is a pure function of its inputs and ``--seed``; tables are
CSV with a header row and floats printed with 17 significant digits.
Exit codes are 0 on success, 1 on validation or domain errors and 2 when
a computational budget is exhausted.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import time

import numpy as np

from . import coalescent, core, fileio, functionals, metrics
from .errors import BudgetExceeded, M2MError, OptimizerBudgetExceeded

DEFAULT_SEED = 0xC0A1E5CE

EXIT_OK, EXIT_INVALID, EXIT_BUDGET = 0, 1, 2


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def render(header, rows, form: str = "csv") -> str:
    if form == "json":
        return json.dumps([dict(zip(header, r)) for r in rows], indent=1, default=float) + "\n"
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(fmt(v) for v in r) + "\n")
    return buf.getvalue()


def emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def parse_int_grid(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


# -- commands --------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        X = fileio.load_m2m(args.file)
    except M2MError as e:
        print(f"invalid: {type(e).__name__}: {e}")
        return EXIT_INVALID
    supp = core.effective_support(X.nu)
    rows = [
        ("points", len(X.space)),
        ("atoms", len(X.nu)),
        ("null_atoms", sum(1 for _, mu in X.nu.atoms if mu.is_null)),
        ("outer_mass", X.nu.mass),
        ("moment_mass", core.moment_measure(X.nu).mass),
        ("effective_support", len(supp)),
        ("diameter", X.space.diameter()),
    ]
    emit(render(("field", "value"), [("valid", True), *rows], args.format), args.out)
    return EXIT_OK


def _shared_space(A: core.M2MSpace, B: core.M2MSpace):
    if A.space != B.space:
        raise M2MError("prokhorov and two_level modes need both files to declare the same space "
                       "(identical points and distance matrix)")
    return A.space


def cmd_distance(args) -> int:
    A, B = fileio.load_m2m(args.file_a), fileio.load_m2m(args.file_b)
    t0 = time.perf_counter()
    if args.mode == "prokhorov":
        space = _shared_space(A, B)
        value = metrics.prokhorov(core.moment_measure(A.nu), core.moment_measure(B.nu), space, args.tol)
        header, row = ["mode", "value"], ["prokhorov", value]
    elif args.mode == "two_level":
        space = _shared_space(A, B)
        value = metrics.two_level_prokhorov(A.nu, B.nu, space, args.tol)
        header, row = ["mode", "value"], ["two_level", value]
    else:
        try:
            b = metrics.d2gp_bounds(A, B, multistarts=args.multistarts, tol=args.tol,
                                    seed=args.seed, max_evals=args.max_evals)
        except OptimizerBudgetExceeded as e:
            if e.bound is not None:
                print(f"budget exhausted; valid interval [{fmt(e.bound.lower)}, {fmt(e.bound.upper)}]",
                      file=sys.stderr)
            raise
        header, row = ["mode", "lower", "upper", "starts_used"], ["d2gp", b.lower, b.upper, b.starts_used]
        if args.witness:
            emit(json.dumps(np.asarray(b.witness).tolist()) + "\n", args.witness)
    elapsed = time.perf_counter() - t0
    if args.timing:
        header.append("wall_time")
        row.append(elapsed)
    else:
        print(f"wall_time {elapsed:.3f}s", file=sys.stderr)
    emit(render(header, [row], args.format), args.out)
    return EXIT_OK


def cmd_tf(args) -> int:
    X = fileio.load_m2m(args.file)
    spec = fileio.load_spec(args.spec)
    if args.mode == "exact":
        rows = [["exact", functionals.eval_tf(spec, X, args.budget)]]
        header = ["mode", "value"]
    else:
        est = functionals.monte_carlo_tf(spec, X, args.replicates, args.seed)
        rows = [["monte_carlo", est.value, est.stderr]]
        header = ["mode", "value", "stderr"]
    emit(render(header, rows, args.format), args.out)
    return EXIT_OK


def _law_rows(params, same, cross):
    from scipy import stats

    rows = []
    if same.size:
        ks = stats.kstest(same, stats.expon(scale=1.0 / params.gamma_g).cdf).statistic
        rows.append(["same_species", same.size, ks, same.mean(), _stderr(same), 1.0 / params.gamma_g])
    if cross.size:
        ks = stats.kstest(cross, lambda t: coalescent.hypoexp_cdf(t, params.gamma_s, params.gamma_g)).statistic
        rows.append(["cross_species", cross.size, ks, cross.mean(), _stderr(cross),
                     1.0 / params.gamma_g + 1.0 / params.gamma_s])
    return rows


def _stderr(v) -> float:
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")


def cmd_simulate(args) -> int:
    params = coalescent.CoalescentParams(args.gamma_s, args.gamma_g, args.M, args.N)
    outputs = set(args.outputs)
    unknown = outputs - {"distances", "blocks", "m2m"}
    if unknown:
        raise M2MError(f"unknown outputs: {sorted(unknown)}")
    os.makedirs(args.out, exist_ok=True)
    dist_rows, block_rows = [], []
    same, cross = [], []
    for r in range(args.replicates):
        d = coalescent.simulate(params, coalescent.derived_rng(args.seed, r))
        if "distances" in outputs:
            if params.N >= 2:
                v = d.pairwise_distance((1, 1), (1, 2))
                same.append(v)
                dist_rows.append([r, "same_species", v])
            if params.M >= 2:
                v = d.pairwise_distance((1, 1), (2, 1))
                cross.append(v)
                dist_rows.append([r, "cross_species", v])
        if "blocks" in outputs:
            times = [0.0] + sorted([t for t, _, _ in d.merge_events] + [t for t, _, _ in d.species_events])
            block_rows.extend([r, *row] for row in coalescent.block_counts(d, times))
        if "m2m" in outputs:
            emit(fileio.dump_m2m(_dense(coalescent.build_m2m(d, params))),
                 os.path.join(args.out, f"m2m_{r:04d}.json"))
    if "distances" in outputs:
        emit(render(["replicate", "pair", "distance"], dist_rows), os.path.join(args.out, "distances.csv"))
        law = _law_rows(params, np.array(same), np.array(cross))
        emit(render(["pair", "samples", "ks_statistic", "mean", "stderr", "expected_mean"], law),
             os.path.join(args.out, "ks.csv"))
    if "blocks" in outputs:
        emit(render(["replicate", "t", "gene_blocks", "species_blocks"], block_rows),
             os.path.join(args.out, "blocks.csv"))
    return EXIT_OK


def _dense(X: core.M2MSpace) -> core.M2MSpace:
    space = core.FiniteMetricSpace(X.space.distance, [f"{i}.{j}" for i, j in X.space.labels])
    return core.M2MSpace(space, X.nu)


def cmd_convergence(args) -> int:
    spec = fileio.load_spec(args.spec)
    for name, grid in (("N grid", args.N_grid), ("M grid", args.M_grid)):
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise M2MError(f"{name} must be strictly ascending")
    limit = (float("nan"), float("nan"))
    if spec.kind in ("TF3", "TF4"):
        limit = coalescent.estimate_limit_statistic(spec, args.gamma_s, args.gamma_g,
                                                    args.limit_replicates, args.seed)
    rows = []
    for M in args.M_grid:
        for N in args.N_grid:
            params = coalescent.CoalescentParams(args.gamma_s, args.gamma_g, M, N)
            q, se = coalescent.estimate_Q(spec, params, args.replicates, args.seed)
            rows.append([M, N, q, se, limit[0], limit[1]])
    header = ["M", "N", "Q_estimate", "stderr", "limit_estimate", "limit_stderr"]
    emit(render(header, rows, args.format), args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    X = fileio.load_m2m(args.file)
    profile = functionals.compactness_profile(X, args.K_grid, args.delta_grid)
    fields = ["K", "delta", "modulus", "dd_total", "dd_mean", "dd_max", "md_total", "md_mean", "md_max"]
    tables = {
        "profile": render(fields, [[getattr(p, f) for f in fields] for p in profile]),
        "distance_distribution": render(
            ["value", "weight"],
            functionals.distance_distribution(core.moment_measure(X.nu), X.space).rows()),
        "mass_distribution": render(["value", "weight"], functionals.mass_distribution(X.nu).rows()),
    }
    if args.out is None:
        sys.stdout.write("\n".join(f"# {name}\n{text}" for name, text in tables.items()))
    else:
        os.makedirs(args.out, exist_ok=True)
        for name, text in tables.items():
            emit(text, os.path.join(args.out, f"{name}.csv"))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=DEFAULT_SEED, help="RNG seed (default 0xC0A1E5CE)")
    common.add_argument("--tol", type=float, default=core.DEFAULT_TOL, help="numerical tolerance")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    p = argparse.ArgumentParser(prog="m2m", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check an m2m JSON file")
    s.add_argument("file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("distance", parents=[common], help="distance between two m2m files")
    s.add_argument("file_a")
    s.add_argument("file_b")
    s.add_argument("--mode", choices=("prokhorov", "two_level", "d2gp"), default="d2gp")
    s.add_argument("--multistarts", type=int, default=4)
    s.add_argument("--max-evals", type=int, default=20000)
    s.add_argument("--witness", help="write the d2gp cross block as a JSON matrix")
    s.add_argument("--timing", action="store_true",
                   help="add a wall_time column (output is then not reproducible)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_distance)

    s = sub.add_parser("tf", parents=[common], help="evaluate a test functional")
    s.add_argument("file")
    s.add_argument("spec")
    s.add_argument("--mode", choices=("exact", "monte_carlo"), default="exact")
    s.add_argument("--replicates", type=int, default=10 ** 5, help="Monte-Carlo samples")
    s.add_argument("--budget", type=int, default=functionals.EXACT_BUDGET)
    s.add_argument("--out")
    s.set_defaults(func=cmd_tf)

    s = sub.add_parser("simulate", parents=[common], help="simulate nested Kingman coalescents")
    s.add_argument("--gamma-s", type=float, default=1.0)
    s.add_argument("--gamma-g", type=float, default=1.0)
    s.add_argument("-M", type=int, required=True)
    s.add_argument("-N", type=int, required=True)
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--outputs", type=lambda t: [v for v in t.split(",") if v],
                   default=["distances", "blocks"], help="comma list of distances,blocks,m2m")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("convergence", parents=[common], help="Q_{M,N} estimates against the limit")
    s.add_argument("spec")
    s.add_argument("--gamma-s", type=float, default=1.0)
    s.add_argument("--gamma-g", type=float, default=1.0)
    s.add_argument("--N-grid", type=parse_int_grid, default=[25, 400])
    s.add_argument("--M-grid", type=parse_int_grid, default=[20])
    s.add_argument("--replicates", type=int, default=200)
    s.add_argument("--limit-replicates", type=int, default=10 ** 4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_convergence)

    s = sub.add_parser("diagnose", parents=[common], help="compactness profile and histograms")
    s.add_argument("file")
    s.add_argument("--K-grid", type=parse_grid, default=[1.0, 2.0, 4.0, 8.0, 16.0])
    s.add_argument("--delta-grid", type=parse_grid, default=[1.0, 0.5, 0.25, 0.125])
    s.add_argument("--out", help="output directory (stdout when omitted)")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BudgetExceeded as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (M2MError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
