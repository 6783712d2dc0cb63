"""Closed-loop simulation harness, CSV logging, and solver benchmarks.

The simulator advances the model with the exact ``step_state`` arithmetic
the controller uses internally, so the state the controller predicts and
the state it is handed next period are the same floats and the plan
hand-off needs no tolerance.  Runs are recorded per step and can be
round-tripped through CSV at full precision.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .feasibility import FeasOptions
from .mpc import AnytimeController, step_state
from .optimize import InfeasibleProblemError, OptOptions, solve
from .scenario import MpcScenario

__all__ = [
    "Budget",
    "StepRecord",
    "SimulationRun",
    "run_closed_loop",
    "verify_records",
    "cumulated_cost",
    "write_run_csv",
    "read_run_csv",
    "BenchRow",
    "benchmark_solver",
    "write_bench_csv",
]

# J is defined over this many initial steps regardless of run length.
_J_STEPS = 11


@dataclass(frozen=True)
class Budget:
    """Per-step computation allowance for the controller.

    Leave both fields ``None`` for an unbounded budget; otherwise set
    exactly one of ``iterations`` (inner Newton cap per step, the
    reproducible mode) or ``milliseconds`` (wall-clock deadline per
    step, machine dependent).
    """

    iterations: Optional[int] = None
    milliseconds: Optional[float] = None

    def __post_init__(self):
        if self.iterations is not None and self.milliseconds is not None:
            raise ValueError("set either iterations or milliseconds, not both")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iteration budget must be nonnegative")
        if self.milliseconds is not None and self.milliseconds < 0:
            raise ValueError("millisecond budget must be nonnegative")

    @classmethod
    def unbounded(cls):
        return cls()

    @classmethod
    def iteration_cap(cls, k):
        return cls(iterations=int(k))

    @classmethod
    def deadline_ms(cls, ms):
        return cls(milliseconds=float(ms))

    def describe(self):
        if self.iterations is not None:
            return f"iterations={self.iterations}"
        if self.milliseconds is not None:
            return f"milliseconds={self.milliseconds:g}"
        return "unbounded"


@dataclass
class StepRecord:
    """Everything observed at one control period.

    ``stage_cost`` is the open-loop objective of the plan chosen at this
    step: the per-step term the cumulated cost J sums.  ``y`` is the
    measured output ``C x`` at the same instant as ``x``.
    ``inner_iters`` counts every Newton iteration the step spent,
    including the short polish pass applied to an adopted point, so it
    can exceed a per-step iteration cap by that bounded allowance.
    """

    t: int
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    phi: float
    f_plus: float
    stage_cost: float
    inner_iters: int
    fallback_used: bool
    solver_status: str = ""


@dataclass
class SimulationRun:
    """A finished closed-loop run with its per-step records."""

    design: object
    budget: Budget
    steps: int
    records: list
    J: float
    seed: Optional[int] = None


def cumulated_cost(records):
    """Sum of the per-step cost terms over the first eleven steps."""
    return float(sum(r.stage_cost for r in records[:_J_STEPS]))


def run_closed_loop(design, budget=None, steps=11, x0=None):
    """Simulate the controller on the nominal model for ``steps`` periods.

    Parameters
    ----------
    design : MpcDesign
        Resolved scenario, terminal pair, and reference.
    budget : Budget, optional
        Per-step allowance; defaults to unbounded.
    steps : int
        Number of control periods; at least 11 so the cumulated cost J
        is defined.
    x0 : (n,) array, optional
        Initial state; defaults to the origin.

    Raises
    ------
    InitializationError
        If no feasible plan exists at ``x0``.
    RuntimeError
        If the recorded run violates the closed-loop guarantees; this
        indicates a controller bug, not a modelling problem.
    """
    if budget is None:
        budget = Budget.unbounded()
    steps = int(steps)
    if steps < _J_STEPS:
        raise ValueError(f"steps must be at least {_J_STEPS} so J is defined")
    sc = design.scenario
    x = np.zeros(sc.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    controller = AnytimeController(design)
    records = []
    for t in range(steps):
        deadline = None
        if budget.milliseconds is not None:
            deadline = time.perf_counter() + budget.milliseconds / 1e3
        u, diag = controller.step(
            x, max_inner_iterations=budget.iterations, deadline=deadline
        )
        records.append(
            StepRecord(
                t=t,
                x=x.copy(),
                u=u,
                y=sc.C @ x,
                phi=diag.phi,
                f_plus=diag.f_plus,
                stage_cost=diag.cost,
                inner_iters=diag.inner_iterations,
                fallback_used=diag.fallback_used,
                solver_status=diag.solver_status,
            )
        )
        x = step_state(sc.A, sc.B, x, u)
    problems = verify_records(design, records)
    if problems:
        raise RuntimeError(
            "closed-loop guarantees violated: " + "; ".join(problems)
        )
    return SimulationRun(
        design=design,
        budget=budget,
        steps=steps,
        records=records,
        J=cumulated_cost(records),
    )


def verify_records(design, records, bound_tol=1e-6, phi_slack=1e-8):
    """Re-check the closed-loop guarantees from recorded data alone.

    Returns a list of human-readable violation descriptions; an empty
    list means every step satisfied the input/output bounds, the model
    consistency of the recorded trajectory, and the accounting decrease.
    """
    sc = design.scenario
    problems = []
    for i, r in enumerate(records):
        if np.any(r.u < sc.u_min - bound_tol) or np.any(
            r.u > sc.u_max + bound_tol
        ):
            problems.append(f"input bound breached at t={r.t}")
        if np.any(r.y < sc.y_min - bound_tol) or np.any(
            r.y > sc.y_max + bound_tol
        ):
            problems.append(f"output bound breached at t={r.t}")
        if np.max(np.abs(r.y - sc.C @ r.x)) > 1e-9:
            problems.append(f"recorded output disagrees with C x at t={r.t}")
        if i > 0:
            prev = records[i - 1]
            drift = np.max(
                np.abs(r.x - step_state(sc.A, sc.B, prev.x, prev.u))
            )
            if drift > 1e-9:
                problems.append(f"state at t={r.t} off the model by {drift:.2e}")
            if r.phi > prev.phi - r.f_plus + phi_slack:
                problems.append(
                    f"accounting value failed to decrease at t={r.t}"
                )
    return problems


# ---------------------------------------------------------------------------
# CSV round-trip


def _header(n, m, p):
    cols = ["t"]
    cols += [f"x{i + 1}" for i in range(n)]
    cols += [f"u{i + 1}" for i in range(m)]
    cols += [f"y{i + 1}" for i in range(p)]
    cols += ["phi", "f_plus", "stage_cost", "inner_iters", "fallback_used"]
    return cols


def _fmt(v):
    return format(float(v), ".17g")


def write_run_csv(run_or_records, path):
    """Write per-step records with full-precision numeric fields."""
    records = getattr(run_or_records, "records", run_or_records)
    if not records:
        raise ValueError("nothing to write: no records")
    n, m, p = len(records[0].x), len(records[0].u), len(records[0].y)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(n, m, p))
        for r in records:
            row = [str(r.t)]
            row += [_fmt(v) for v in r.x]
            row += [_fmt(v) for v in r.u]
            row += [_fmt(v) for v in r.y]
            row += [_fmt(r.phi), _fmt(r.f_plus), _fmt(r.stage_cost)]
            row += [str(r.inner_iters), str(int(r.fallback_used))]
            writer.writerow(row)


def read_run_csv(path):
    """Parse a run CSV back into records; inverse of :func:`write_run_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for c in header if c.startswith("x"))
        m = sum(1 for c in header if c.startswith("u"))
        p = sum(1 for c in header if c.startswith("y"))
        if header != _header(n, m, p):
            raise ValueError("unrecognized run CSV header")
        records = []
        for row in reader:
            vals = iter(row)
            t = int(next(vals))
            x = np.array([float(next(vals)) for _ in range(n)])
            u = np.array([float(next(vals)) for _ in range(m)])
            y = np.array([float(next(vals)) for _ in range(p)])
            records.append(
                StepRecord(
                    t=t,
                    x=x,
                    u=u,
                    y=y,
                    phi=float(next(vals)),
                    f_plus=float(next(vals)),
                    stage_cost=float(next(vals)),
                    inner_iters=int(next(vals)),
                    fallback_used=bool(int(next(vals))),
                )
            )
    return records


# ---------------------------------------------------------------------------
# solver timing


@dataclass
class BenchRow:
    """Timing summary for one horizon length."""

    N: int
    variables: int
    rows: int
    median_ms: float
    p95_ms: float
    iterations: int
    statuses: tuple = ()


def _with_horizon(scenario, N):
    return MpcScenario(
        A=scenario.A, B=scenario.B, C=scenario.C,
        u_min=scenario.u_min, u_max=scenario.u_max,
        y_min=scenario.y_min, y_max=scenario.y_max,
        N=N, Q_stage=scenario.Q_stage, R_stage=scenario.R_stage,
        reference_vertices=scenario.reference_vertices,
        S=scenario.S, s=scenario.s,
    )


def benchmark_solver(horizons=(6,), kind="qp", repetitions=3, seed=0,
                     reference=0.5):
    """Time cold solves of horizon problems on the packaged scenario.

    ``kind="qp"`` uses the polyhedral terminal set (all rows affine);
    ``"qcqp"`` uses the ellipsoidal one (one quadratic row per interior
    step plus the terminal row).  Each repetition solves from a fresh
    random initial state drawn from the seeded generator, so a fixed
    seed reproduces iteration counts exactly; wall-clock numbers remain
    machine dependent.
    """
    from .mpc import build_mpc_problem
    from .scenario import (
        design_for_reference,
        load_example_scenario,
        load_example_terminal_polyhedron,
        load_example_terminal_set,
    )

    if kind not in ("qp", "qcqp"):
        raise ValueError(f"unknown benchmark kind {kind!r}")
    base = load_example_scenario()
    terminal = (
        load_example_terminal_polyhedron()
        if kind == "qp"
        else load_example_terminal_set()
    )
    rng = np.random.default_rng(seed)
    out = []
    for N in horizons:
        scenario = _with_horizon(base, int(N))
        design = design_for_reference(
            scenario, terminal, np.atleast_1d(reference)
        )
        options = OptOptions(
            gap_tol=1e-6,
            feas_options=FeasOptions(
                feas_tol=1e-10, hessian_mode="full", max_iterations=2000
            ),
        )
        times = []
        iterations = 0
        statuses = []
        problem = None
        for _ in range(int(repetitions)):
            # Short horizons cannot reach the terminal set from every
            # state in the draw box, so redraw until the instance is
            # solvable; the seeded generator keeps the sequence (and
            # hence the iteration counts) reproducible.
            for _attempt in range(50):
                x0 = rng.uniform(-0.4, 0.4, size=scenario.n)
                problem, layout = build_mpc_problem(design, x0, None)
                start = np.zeros(layout.n_z)
                tic = time.perf_counter()
                try:
                    res = solve(problem, options, x0=start)
                except InfeasibleProblemError:
                    continue
                times.append((time.perf_counter() - tic) * 1e3)
                iterations += res.inner_iterations
                statuses.append(res.status)
                break
            else:
                raise RuntimeError(
                    f"no feasible benchmark instance found for N={N}"
                )
        out.append(
            BenchRow(
                N=int(N),
                variables=problem.n,
                rows=problem.constraints.m + problem.constraints.m_eq,
                median_ms=float(np.median(times)),
                p95_ms=float(np.percentile(times, 95)),
                iterations=iterations,
                statuses=tuple(statuses),
            )
        )
    return out


def write_bench_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["N", "variables", "rows", "median_ms", "p95_ms", "iterations"]
        )
        for r in rows:
            writer.writerow(
                [r.N, r.variables, r.rows, _fmt(r.median_ms),
                 _fmt(r.p95_ms), r.iterations]
            )
