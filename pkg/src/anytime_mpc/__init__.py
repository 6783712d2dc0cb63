"""Anytime linear MPC on top of a piecewise-smooth Newton convex solver.

The package is organised bottom up:

- ``convex``: immutable convex function / constraint-system containers and
  the squared-violation merit machinery shared by every solver layer.
- ``feasibility``: regularized piecewise-smooth Newton iteration that either
  finds a point of a convex set or certifies the set empty.
- ``optimize``: level-set bisection for constrained convex minimization,
  with dual and interpolation bounds to shrink the bracket faster.
- ``terminal``: terminal-set construction (LQR via Riccati iteration,
  ellipsoid scaling, maximal constraint-admissible invariant polyhedra).
- ``scenario``: plant/cost/constraint scenario container and JSON I/O.
- ``mpc``: receding-horizon controller with a shifted fallback plan and a
  decreasing terminal-violation budget, usable under any iteration budget.
- ``simulate``: closed-loop simulation harness, CSV logging, benchmarks.
- ``cli``: the ``psn`` and ``mpc-sim`` command-line entry points.
"""

from anytime_mpc.convex import ConvexFunction, FeasibilityProblem, OptimizationProblem
from anytime_mpc.feasibility import FeasOptions, FeasResult, solve_feasibility
from anytime_mpc.mpc import (
    AnytimeController,
    InitializationError,
    Plan,
    StepDiagnostics,
    build_mpc_problem,
    compute_phi,
    make_plan,
    plan_violation,
    shift_plan,
    step_state,
)
from anytime_mpc.optimize import Bracket, OptOptions, OptResult, solve
from anytime_mpc.scenario import (
    MpcDesign,
    MpcScenario,
    design_for_reference,
    load_example_scenario,
    load_example_terminal_polyhedron,
    load_example_terminal_set,
    load_scenario,
    save_scenario,
)
from anytime_mpc.simulate import (
    BenchRow,
    Budget,
    SimulationRun,
    StepRecord,
    benchmark_solver,
    read_run_csv,
    run_closed_loop,
    verify_records,
    write_bench_csv,
    write_run_csv,
)

__all__ = [
    "ConvexFunction",
    "FeasibilityProblem",
    "OptimizationProblem",
    "FeasOptions",
    "FeasResult",
    "solve_feasibility",
    "Bracket",
    "OptOptions",
    "OptResult",
    "solve",
    "AnytimeController",
    "InitializationError",
    "Plan",
    "StepDiagnostics",
    "build_mpc_problem",
    "compute_phi",
    "make_plan",
    "plan_violation",
    "shift_plan",
    "step_state",
    "MpcDesign",
    "MpcScenario",
    "design_for_reference",
    "load_example_scenario",
    "load_example_terminal_polyhedron",
    "load_example_terminal_set",
    "load_scenario",
    "save_scenario",
    "BenchRow",
    "Budget",
    "SimulationRun",
    "StepRecord",
    "benchmark_solver",
    "read_run_csv",
    "run_closed_loop",
    "verify_records",
    "write_bench_csv",
    "write_run_csv",
]
