"""Command-line front end.

Exit codes: 0 success, 1 assumption or validation failure (including bad
option values and the growth guard), 2 I/O or parse error (including missing
options), 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .gdist import (
    ExtractionMode,
    extract_triples,
    g_infinity_cdf,
    g_infinity_density,
    read_triples_csv,
    sample_tree_triples,
    write_triples_csv,
)
from .identify import (
    ANALYTIC,
    FitError,
    OptimizerConfig,
    SimulatedTrees,
    fit_mle,
    recovery_experiment,
)
from .linalg import ConvergenceError, leading_left_eigenpair
from .params import ParamsError, load_params, validate
from .tree_sim import ColoredTree, GrowthLimitError, simulate_tree, simulate_type_counts, type_counts, uncolor

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % 2**64)
    return args.seed


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


def _config(args) -> dict:
    return {k: _plain(v) for k, v in vars(args).items() if k != "func"}


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _params(args):
    if args.params is None:
        raise UsageError("--params is required")
    return load_params(args.params)


def cmd_validate(args) -> int:
    params = _params(args)
    report = validate(params)
    payload = report.to_dict()
    payload["config"] = _config(args)
    _write_json(args.out, payload)
    for c in report.failed():
        print(f"Assumption {c.number} ({c.name}) failed: {c.detail}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_simulate(args) -> int:
    params = _params(args)
    if args.depth is None or args.depth <= 0:
        raise ValueError("--depth must be positive")
    rng = np.random.default_rng(_seed(args))
    u = leading_left_eigenpair(params.derived.A).u.tolist() if params.m > 1 else [1.0]
    summary = {"config": _config(args), "analytic_u": u}
    if args.counts_only:
        counts = simulate_type_counts(params, args.depth, args.replicates, rng)
        totals = counts.sum(axis=1)
        freqs = counts / totals[:, None]
        summary.update(
            leaf_counts=totals.tolist(),
            R_T=freqs.tolist(),
            mean_leaf_count=float(totals.mean()),
            mean_R_T=freqs.mean(axis=0).tolist(),
        )
    else:
        if args.out is None:
            raise UsageError("--out directory is required unless --counts-only")
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        leaves, freqs = [], []
        for k in range(args.replicates):
            tree = simulate_tree(params, args.depth, rng, bifurcating_root=args.bifurcating_root)
            (outdir / f"tree_{k:05d}.nwk").write_text(uncolor(tree).to_newick() + "\n")
            (outdir / f"tree_{k:05d}.json").write_text(tree.to_json() + "\n")
            tc = type_counts(tree, args.depth)
            leaves.append(tc.total)
            freqs.append(tc.freqs.tolist())
        summary.update(
            leaf_counts=leaves,
            R_T=freqs,
            mean_leaf_count=float(np.mean(leaves)),
            mean_R_T=np.mean(freqs, axis=0).tolist(),
        )
    if args.counts_only and args.out is None:
        _write_json(None, summary)
    else:
        target = Path(args.out) / "summary.json" if not args.counts_only else Path(args.out)
        _write_json(target, summary)
    return EXIT_OK


def cmd_triples(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    mode = ExtractionMode(args.mode)
    rng = np.random.default_rng(_seed(args))
    triples = []
    if args.trees:
        for path in args.trees:
            try:
                tree = ColoredTree.from_json(Path(path).read_text())
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParamsError(f"{path}: not a colored tree file ({exc})") from exc
            t = tree.depth / 2 if args.time is None else args.time
            if t >= tree.depth:
                raise ValueError(f"--time {t} must be below the tree depth {tree.depth}")
            triples.extend(extract_triples(tree, t, mode, rng))
    else:
        params = _params(args)
        if args.depth is None:
            raise UsageError("--depth is required when simulating trees")
        t = args.depth / 2 if args.time is None else args.time
        if not 0 < t < args.depth:
            raise ValueError(f"--time {t} must lie strictly between 0 and --depth {args.depth}")
        triples = sample_tree_triples(params, args.depth, args.replicates, rng, t=t, mode=mode)
    write_triples_csv(args.out, triples, metadata={"config": _config(args), "n_triples": len(triples)})
    return EXIT_OK


def cmd_density(args) -> int:
    params = _params(args)
    if args.tau_max <= 0 or args.points < 1:
        raise ValueError("--tau-max must be positive and --points at least 1")
    grid = np.linspace(0.0, 1.0, args.points)
    # quadratic spacing crowds points near 0, where the density varies fastest
    grid = args.tau_max * (grid**2 if args.spacing == "quadratic" else grid)
    t0, t1, t2 = (a.ravel() for a in np.meshgrid(grid, grid, grid, indexing="ij"))
    pdf = g_infinity_density(params, t0, t1, t2)
    cdf = g_infinity_cdf(params, t0, t1, t2)
    lines = ["tau0,tau1,tau2,pdf,cdf"]
    lines += [
        ",".join(format(x, ".12g") for x in row) for row in zip(t0, t1, t2, np.atleast_1d(pdf), np.atleast_1d(cdf))
    ]
    if args.out is None:
        raise UsageError("--out is required")
    Path(args.out).write_text("\n".join(lines) + "\n")
    _write_json(str(args.out) + ".json", {"config": _config(args)})
    return EXIT_OK


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(n_jobs=args.jobs)


def cmd_fit(args) -> int:
    if args.triples is None:
        raise UsageError("--triples is required")
    try:
        X = read_triples_csv(args.triples)
    except ValueError as exc:
        raise UsageError(f"cannot parse {args.triples}: {exc}") from exc
    rng = np.random.default_rng(_seed(args))
    t = time.perf_counter()
    fit = fit_mle(X, args.types, args.starts, rng, _optimizer_config(args))
    payload = fit.to_dict()
    payload["wall_time"] = time.perf_counter() - t
    payload["config"] = _config(args)
    _write_json(args.out, payload)
    return EXIT_OK


def cmd_recover(args) -> int:
    params = _params(args)
    seed = _seed(args)
    if args.depth is None:
        source = ANALYTIC
    else:
        source = SimulatedTrees(T=args.depth, mode=ExtractionMode(args.mode), t=args.time)
    n = args.replicates
    if n is None and source == ANALYTIC:
        raise UsageError("--replicates (number of triples) is required for analytic triples")
    t = time.perf_counter()
    report = recovery_experiment(params, n, source, args.starts, seed, _optimizer_config(args))
    payload = report.to_dict()
    payload["wall_time"] = time.perf_counter() - t
    payload["config"] = _config(args)
    _write_json(args.out, payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpbt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "check the modelling assumptions of a parameter file")
    p.add_argument("--params", type=Path)
    p.add_argument("--out", type=Path, help="report path (default stdout)")

    p = add("simulate", cmd_simulate, "simulate colored trees")
    p.add_argument("--params", type=Path)
    p.add_argument("--depth", type=float)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory (a JSON path with --counts-only)")
    p.add_argument("--bifurcating-root", action="store_true")
    p.add_argument("--counts-only", action="store_true",
                   help="simulate only the type counts at the depth; no tree files")

    p = add("triples", cmd_triples, "extract edge-length triples to CSV")
    p.add_argument("--params", type=Path)
    p.add_argument("--trees", nargs="*", type=Path, help="colored tree JSON files to read instead of simulating")
    p.add_argument("--depth", type=float)
    p.add_argument("--time", type=float, help="extraction time (default depth/2)")
    p.add_argument("--replicates", type=int, default=1, help="number of trees to simulate")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=[m.value for m in ExtractionMode], default=ExtractionMode.ONE_PER_TREE.value)
    p.add_argument("--out", type=Path)

    p = add("density", cmd_density, "tabulate the limiting triple density and cdf on a grid")
    p.add_argument("--params", type=Path)
    p.add_argument("--tau-max", type=float, default=20.0)
    p.add_argument("--points", type=int, default=11, help="grid points per axis")
    p.add_argument("--spacing", choices=["linear", "quadratic"], default="linear")
    p.add_argument("--out", type=Path)

    p = add("fit", cmd_fit, "maximum-likelihood fit from a triple CSV")
    p.add_argument("--triples", type=Path)
    p.add_argument("--types", type=int, default=2)
    p.add_argument("--starts", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)

    p = add("recover", cmd_recover, "simulate triples, fit, and report recovery errors")
    p.add_argument("--params", type=Path)
    p.add_argument("--replicates", type=int, help="number of triples")
    p.add_argument("--depth", type=float, help="draw triples from simulated trees of this depth")
    p.add_argument("--time", type=float)
    p.add_argument("--mode", choices=[m.value for m in ExtractionMode], default=ExtractionMode.ONE_PER_TREE.value)
    p.add_argument("--starts", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParamsError, OSError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GrowthLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FitError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
