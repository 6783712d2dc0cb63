"""Command-line front ends: `psn` for the solver, `mpc-sim` for the loop.

`psn solve` minimizes a problem JSON file and reports the result as one
JSON object on stdout; its exit code says how the solve ended (0
converged, 2 budget exhausted, 3 infeasible, 4 unbounded).  `mpc-sim`
runs the closed loop on a scenario/terminal-set pair, times the solver
on horizon grids, and constructs terminal sets.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from .convex import load_problem
from .optimize import (
    InfeasibleProblemError,
    OptOptions,
    UnboundedProblemError,
    solve,
)
from .scenario import (
    design_for_reference,
    load_example_scenario,
    load_scenario,
    polyhedral_terminal_set,
)
from .simulate import (
    Budget,
    benchmark_solver,
    run_closed_loop,
    write_bench_csv,
    write_run_csv,
)
from .terminal import load_terminal_set, save_terminal_set

EXIT_CONVERGED = 0
EXIT_BUDGET = 2
EXIT_INFEASIBLE = 3
EXIT_UNBOUNDED = 4


def _finite_or_none(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _write_trace(trace, path):
    if not path:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "kind", "t", "t_minus", "t_plus", "inner_iterations"]
        )
        for row in trace:
            writer.writerow([
                row["round"], row["kind"],
                format(row["t"], ".17g"),
                format(row["t_minus"], ".17g"),
                format(row["t_plus"], ".17g"),
                row["inner_iterations"],
            ])


def psn_main(argv=None):
    parser = argparse.ArgumentParser(
        prog="psn",
        description="Convex feasibility/optimization solver front end.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("solve", help="minimize a problem JSON file")
    sp.add_argument("problem", help="problem JSON path")
    sp.add_argument("--eps", type=float, default=1e-6,
                    help="target optimality gap (default 1e-6)")
    sp.add_argument("--budget-ms", type=float, default=None,
                    help="wall-clock budget in milliseconds")
    sp.add_argument("--trace", default=None,
                    help="write a per-round bisection trace CSV here")
    args = parser.parse_args(argv)

    problem = load_problem(args.problem)
    deadline = None
    if args.budget_ms is not None:
        deadline = time.perf_counter() + args.budget_ms / 1e3
    options = OptOptions(gap_tol=args.eps, deadline=deadline)
    trace = []
    try:
        res = solve(problem, options, trace=trace)
    except InfeasibleProblemError as exc:
        _write_trace(trace, args.trace)
        print(json.dumps({"status": "infeasible", "reason": str(exc)}))
        return EXIT_INFEASIBLE
    except UnboundedProblemError as exc:
        _write_trace(trace, args.trace)
        print(json.dumps({"status": "unbounded", "reason": str(exc)}))
        return EXIT_UNBOUNDED
    _write_trace(trace, args.trace)
    print(json.dumps({
        "x": res.x.tolist(),
        "f0": _finite_or_none(res.objective_value),
        "gap": _finite_or_none(res.gap),
        "iterations": res.inner_iterations,
        "status": res.status,
    }))
    return EXIT_CONVERGED if res.converged else EXIT_BUDGET


def _load_pair(args):
    scenario = (
        load_scenario(args.scenario) if args.scenario
        else load_example_scenario()
    )
    if args.terminal_set:
        terminal = load_terminal_set(args.terminal_set)
    else:
        from .scenario import load_example_terminal_set

        terminal = load_example_terminal_set()
    return scenario, terminal


def _budget_from(args):
    if args.budget_iters is not None:
        return Budget.iteration_cap(args.budget_iters)
    if args.budget_ms is not None:
        return Budget.deadline_ms(args.budget_ms)
    return Budget.unbounded()


def mpc_sim_main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mpc-sim",
        description="Closed-loop simulation and solver timing harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate the closed loop")
    run_p.add_argument("--scenario", default=None,
                       help="scenario JSON (default: packaged example)")
    run_p.add_argument("--terminal-set", default=None,
                       help="terminal-set JSON (default: packaged ellipsoid)")
    group = run_p.add_mutually_exclusive_group()
    group.add_argument("--budget-iters", type=int, default=None,
                       help="inner-iteration cap per step")
    group.add_argument("--budget-ms", type=float, default=None,
                       help="wall-clock budget per step, milliseconds")
    group.add_argument("--unbounded", action="store_true",
                       help="no per-step budget (default)")
    run_p.add_argument("--steps", type=int, default=11)
    run_p.add_argument("--reference", type=float, default=0.5,
                       help="output reference value (default 0.5)")
    run_p.add_argument("--x0", default=None,
                       help="comma-separated initial state (default zeros)")
    run_p.add_argument("--out", required=True, help="run CSV output path")

    bench_p = sub.add_parser("bench", help="time cold solves on a horizon grid")
    bench_p.add_argument("--type", choices=("qp", "qcqp"), default="qp")
    bench_p.add_argument("--horizons", default="6",
                         help="comma-separated horizon lengths")
    bench_p.add_argument("--reps", type=int, default=3)
    bench_p.add_argument("--seed", type=int, default=0)
    bench_p.add_argument("--out", required=True, help="bench CSV output path")

    make_p = sub.add_parser(
        "make-terminal-set",
        help="construct the maximal admissible polyhedron for a scenario",
    )
    make_p.add_argument("--scenario", default=None,
                        help="scenario JSON (default: packaged example)")
    make_p.add_argument("--contraction", type=float, default=1.0,
                        help="contraction factor per step (default 1.0)")
    make_p.add_argument("--out", required=True, help="terminal-set JSON path")

    args = parser.parse_args(argv)

    if args.command == "run":
        scenario, terminal = _load_pair(args)
        design = design_for_reference(
            scenario, terminal, np.atleast_1d(args.reference)
        )
        x0 = None
        if args.x0 is not None:
            x0 = np.array([float(v) for v in args.x0.split(",")])
        run = run_closed_loop(design, _budget_from(args), steps=args.steps,
                              x0=x0)
        write_run_csv(run, args.out)
        print(json.dumps({
            "J": run.J,
            "steps": run.steps,
            "budget": run.budget.describe(),
            "out": args.out,
        }))
        return 0

    if args.command == "bench":
        horizons = tuple(int(v) for v in args.horizons.split(","))
        rows = benchmark_solver(
            horizons=horizons, kind=args.type, repetitions=args.reps,
            seed=args.seed,
        )
        write_bench_csv(rows, args.out)
        for r in rows:
            print(json.dumps({
                "N": r.N, "variables": r.variables, "rows": r.rows,
                "median_ms": round(r.median_ms, 3),
                "p95_ms": round(r.p95_ms, 3),
                "iterations": r.iterations,
            }))
        return 0

    if args.command == "make-terminal-set":
        scenario = (
            load_scenario(args.scenario) if args.scenario
            else load_example_scenario()
        )
        terminal = polyhedral_terminal_set(
            scenario, contraction=args.contraction
        )
        save_terminal_set(terminal, args.out)
        print(json.dumps({"facets": terminal.facets, "out": args.out}))
        return 0

    parser.error(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(psn_main())
