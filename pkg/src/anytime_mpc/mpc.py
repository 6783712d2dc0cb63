"""Anytime model predictive control over a convex feasibility solver.

The controller keeps a feasible plan at all times.  Each step first
shifts the previous plan by one period, appending the terminal-gain
input, which is feasible by invariance of the terminal set and costs no
solver work.  Whatever optimization budget remains is then spent
improving on that fallback through the level-set solver, warm-started at
the fallback itself, so interrupting at any point still leaves a valid
input.

Feasibility across time is enforced through a scalar accounting value
``phi``: the sum of positive terminal-membership values along the plan's
interior states.  Each problem carries a budget row forcing the new
plan's slack total below ``phi_prev`` minus the already-realized part,
which makes ``phi`` nonincreasing and drives the state into the terminal
set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convex import ConvexFunction, FeasibilityProblem, OptimizationProblem
from .feasibility import FeasOptions, solve_feasibility
from .optimize import InfeasibleProblemError, OptOptions, solve

__all__ = [
    "Plan",
    "PlanLayout",
    "StepDiagnostics",
    "InitializationError",
    "step_state",
    "make_plan",
    "open_loop_cost",
    "compute_phi",
    "shift_plan",
    "plan_violation",
    "build_mpc_problem",
    "AnytimeController",
]

# Regenerated plans must respect input/output bounds to this tolerance
# before the controller adopts them.
_PLAN_TOL = 1e-6
# The terminal state of an adopted plan is held to a much tighter line:
# any excess there reappears verbatim in the next step's accounting sum,
# so it must stay well below the decrease slack.
_TERMINAL_TOL = 1e-9
# The accounting decrease is asserted at this slack when validating an
# optimizer plan against the budget row.
_PHI_TOL = 1e-8
# Measured states further than this from the prediction break the
# feasibility hand-off and are rejected.
_STATE_MISMATCH_TOL = 1e-6
_INIT_MAX_ITERATIONS = 5000
# Solver output is polished to this violation before a plan is rebuilt
# from it: re-rolling the dynamics amplifies equality residuals by the
# growth of A over the horizon, so a point at the solver's own tolerance
# can regenerate into a plan that misses the terminal gate.
_POLISH_FEAS_TOL = 1e-12
_POLISH_ITERATIONS = 50


class InitializationError(RuntimeError):
    """No feasible plan could be constructed for the initial state."""


def step_state(A, B, x, u):
    """One model step ``Ax + Bu``.

    Every state in this module is produced by this exact expression, and
    simulators should use it too: identical arithmetic keeps the shifted
    plan's accounting identity exact instead of tolerance-bound.
    """
    return A @ x + B @ u


@dataclass
class Plan:
    """An input sequence with its regenerated states and open-loop cost.

    ``states[k+1]`` always equals ``step_state(A, B, states[k],
    inputs[k])``; states are never stored independently of the inputs
    that produced them.
    """

    inputs: np.ndarray
    states: np.ndarray
    cost: float


def open_loop_cost(design, states, inputs):
    """Stage costs over the horizon plus the terminal cost."""
    sc = design.scenario
    x_r, u_r = design.x_r, design.u_r
    total = 0.0
    for k in range(sc.N):
        dx = states[k] - x_r
        du = inputs[k] - u_r
        total += float(dx @ sc.Q_stage @ dx) + float(du @ sc.R_stage @ du)
    dx = states[sc.N] - x_r
    total += float(dx @ design.P_cost @ dx)
    return total


def make_plan(design, x_now, inputs):
    """Roll the model forward from ``x_now`` under ``inputs``."""
    sc = design.scenario
    inputs = np.asarray(inputs, dtype=float).reshape(sc.N, sc.m)
    states = np.empty((sc.N + 1, sc.n))
    states[0] = np.asarray(x_now, dtype=float).reshape(sc.n)
    for k in range(sc.N):
        states[k + 1] = step_state(sc.A, sc.B, states[k], inputs[k])
    return Plan(inputs, states, open_loop_cost(design, states, inputs))


def compute_phi(design, plan):
    """Sum of positive terminal-membership values over interior states.

    Accumulated in state order starting at the first interior state, so
    subtracting that first term from the result never goes negative in
    floating point; the controller's budget row relies on this.
    """
    total = 0.0
    for k in range(1, design.scenario.N):
        total += max(design.terminal_value(plan.states[k]), 0.0)
    return total


def shift_plan(design, plan):
    """The one-period-later fallback plan.

    Drops the first input, appends the terminal-gain input at the old
    final state, and rolls states from the old second state.  Feasible
    whenever ``plan`` was, by invariance of the terminal set.
    """
    sc = design.scenario
    u_app = design.K_term @ (plan.states[sc.N] - design.x_r) + design.u_r
    inputs = np.vstack([plan.inputs[1:], u_app.reshape(1, sc.m)])
    return make_plan(design, plan.states[1], inputs)


def plan_violation(design, plan):
    """Worst bound or terminal violation along the plan, in constraint units."""
    sc = design.scenario
    worst = -np.inf
    for k in range(sc.N):
        u = plan.inputs[k]
        y_next = sc.C @ plan.states[k + 1]
        worst = max(
            worst,
            float(np.max(u - sc.u_max)),
            float(np.max(sc.u_min - u)),
            float(np.max(y_next - sc.y_max)),
            float(np.max(sc.y_min - y_next)),
        )
    return max(worst, design.terminal_value(plan.states[sc.N]))


class PlanLayout:
    """Index map of the decision vector.

    Order: inputs ``u_0..u_{N-1}``, states ``x_1..x_N``, then the
    interior slacks ``eps_1..eps_{N-1}``.
    """

    def __init__(self, N, n, m, n_f):
        self.N = int(N)
        self.n = int(n)
        self.m = int(m)
        self.n_f = int(n_f)

    @property
    def n_z(self):
        return self.N * self.m + self.N * self.n + (self.N - 1)

    def u_slice(self, k):
        if not 0 <= k < self.N:
            raise IndexError(f"input index {k} outside 0..{self.N - 1}")
        return slice(k * self.m, (k + 1) * self.m)

    def x_slice(self, k):
        if not 1 <= k <= self.N:
            raise IndexError(f"state index {k} outside 1..{self.N}")
        base = self.N * self.m
        return slice(base + (k - 1) * self.n, base + k * self.n)

    def eps_index(self, k):
        if not 1 <= k <= self.N - 1:
            raise IndexError(f"slack index {k} outside 1..{self.N - 1}")
        return self.N * self.m + self.N * self.n + (k - 1)

    def pack(self, design, plan):
        """Decision vector realizing ``plan`` with tight slacks."""
        z = np.zeros(self.n_z)
        for k in range(self.N):
            z[self.u_slice(k)] = plan.inputs[k]
        for k in range(1, self.N + 1):
            z[self.x_slice(k)] = plan.states[k]
        for k in range(1, self.N):
            z[self.eps_index(k)] = max(
                design.terminal_value(plan.states[k]), 0.0
            )
        return z

    def unpack(self, z):
        """Input sequence stored in a decision vector."""
        z = np.asarray(z, dtype=float)
        return z[: self.N * self.m].reshape(self.N, self.m).copy()


def _lift(fn, sl, n_z, eps=None):
    """Embed an x-space function at slice ``sl`` of the decision vector.

    With ``eps`` given, subtract that slack variable: the row becomes
    ``fn(x_k) - eps_k <= 0``.
    """
    q = np.zeros(n_z)
    q[sl] = fn.q
    if eps is not None:
        q[eps] = -1.0
    if fn.is_affine:
        return ConvexFunction.affine(q, fn.c)
    Q = np.zeros((n_z, n_z))
    Q[sl, sl] = fn.Q
    return ConvexFunction.quadratic(Q, q, fn.c)


def build_mpc_problem(design, x_now, phi_prev=None):
    """Assemble the horizon problem at the measured state.

    Returns ``(problem, layout)``.  Inequality rows appear in a fixed
    order: for each step the input bounds then next-output bounds, the
    terminal membership rows, the slack domination rows (step-major),
    slack nonnegativity, and finally the budget row when ``phi_prev`` is
    given; ``phi_prev=None`` (initialization) omits the budget row.

    Raises
    ------
    ValueError
        If the slack budget ``phi_prev - f(x_now)_+`` is negative, which
        can only happen when the caller's accounting is corrupt or the
        measured state was not produced by the reported plan.
    """
    sc = design.scenario
    n, m, p, N = sc.n, sc.m, sc.p, sc.N
    x_now = np.asarray(x_now, dtype=float).reshape(n)
    terminal_fns = design.terminal_functions()
    layout = PlanLayout(N, n, m, len(terminal_fns))
    n_z = layout.n_z

    ineqs = []
    CA = sc.C @ sc.A
    CB = sc.C @ sc.B
    y_from_x0 = CA @ x_now

    def bound_rows(coeff_slices, offsets_hi, offsets_lo, shift=None):
        """Rows value <= hi and -value <= -lo for a linear expression."""
        dim = len(offsets_hi)
        consts = (np.zeros(dim) if shift is None
                  else np.asarray(shift, dtype=float).reshape(dim))
        hi, lo = [], []
        for i in range(dim):
            row = np.zeros(n_z)
            for sl, M in coeff_slices:
                row[sl] += M[i]
            hi.append(ConvexFunction.affine(row, consts[i] - offsets_hi[i]))
            lo.append(ConvexFunction.affine(-row, -consts[i] + offsets_lo[i]))
        return hi, lo

    for k in range(N):
        us = layout.u_slice(k)
        # Input box at step k.
        hi, lo = bound_rows([(us, np.eye(m))], sc.u_max, sc.u_min)
        ineqs.extend(hi)
        ineqs.extend(lo)
        # Next-output box: y_{k+1} = C(A x_k + B u_k); x_0 is data.
        if k == 0:
            hi, lo = bound_rows([(us, CB)], sc.y_max, sc.y_min,
                                shift=y_from_x0)
        else:
            xs = layout.x_slice(k)
            hi, lo = bound_rows([(xs, CA), (us, CB)], sc.y_max, sc.y_min)
        ineqs.extend(hi)
        ineqs.extend(lo)

    for fn in terminal_fns:
        ineqs.append(_lift(fn, layout.x_slice(N), n_z))

    for k in range(1, N):
        for fn in terminal_fns:
            ineqs.append(
                _lift(fn, layout.x_slice(k), n_z, eps=layout.eps_index(k))
            )
    for k in range(1, N):
        row = np.zeros(n_z)
        row[layout.eps_index(k)] = -1.0
        ineqs.append(ConvexFunction.affine(row, 0.0))

    if phi_prev is not None:
        f_plus_now = max(design.terminal_value(x_now), 0.0)
        budget = phi_prev - f_plus_now
        if budget < 0.0:
            raise ValueError(
                f"negative slack budget {budget:.3e}: accounting value "
                "and measured state are inconsistent"
            )
        row = np.zeros(n_z)
        for k in range(1, N):
            row[layout.eps_index(k)] = 1.0
        ineqs.append(ConvexFunction.affine(row, -budget))

    equalities = []
    for k in range(N):
        xs_next = layout.x_slice(k + 1)
        us = layout.u_slice(k)
        for i in range(n):
            row = np.zeros(n_z)
            row[xs_next.start + i] = 1.0
            row[us] = -sc.B[i]
            if k == 0:
                rhs = float((sc.A @ x_now)[i])
            else:
                row[layout.x_slice(k)] = -sc.A[i]
                rhs = 0.0
            equalities.append((row, rhs))

    Qz = np.zeros((n_z, n_z))
    qz = np.zeros(n_z)
    R2 = 2.0 * sc.R_stage
    Q2 = 2.0 * sc.Q_stage
    u_lin = -2.0 * (sc.R_stage @ design.u_r)
    x_lin = -2.0 * (sc.Q_stage @ design.x_r)
    u_const = float(design.u_r @ sc.R_stage @ design.u_r)
    x_const = float(design.x_r @ sc.Q_stage @ design.x_r)
    cz = 0.0
    for k in range(N):
        us = layout.u_slice(k)
        Qz[us, us] += R2
        qz[us] += u_lin
        cz += u_const
    for k in range(1, N):
        xs = layout.x_slice(k)
        Qz[xs, xs] += Q2
        qz[xs] += x_lin
        cz += x_const
    xs = layout.x_slice(N)
    Qz[xs, xs] += 2.0 * design.P_cost
    qz[xs] += -2.0 * (design.P_cost @ design.x_r)
    cz += float(design.x_r @ design.P_cost @ design.x_r)
    dx0 = x_now - design.x_r
    cz += float(dx0 @ sc.Q_stage @ dx0)
    objective = ConvexFunction.quadratic(Qz, qz, cz)

    constraints = FeasibilityProblem(n_z, ineqs, equalities)
    return OptimizationProblem(objective, constraints), layout


def _polish_point(constraints, z):
    """Drive an almost-feasible point down to rounding-level violation.

    A handful of Newton iterations from an already excellent start; the
    original point is kept if polishing somehow made things worse.
    Returns the point and the iterations spent.
    """
    res = solve_feasibility(
        constraints, z,
        FeasOptions(
            feas_tol=_POLISH_FEAS_TOL, hessian_mode="full",
            max_iterations=_POLISH_ITERATIONS,
        ),
    )
    if constraints.max_violation(res.x) <= constraints.max_violation(z):
        return res.x, res.iterations
    return z, res.iterations


@dataclass
class StepDiagnostics:
    """Per-step record: accounting value, cost, and solver effort."""

    t: int
    phi: float
    f_plus: float
    cost: float
    inner_iterations: int
    fallback_used: bool
    solver_status: str


class AnytimeController:
    """Closed-loop controller with a hard feasibility floor.

    The first :meth:`step` call solves only for feasibility (no budget
    row), establishing the initial plan; that work is reported but not
    limited by the improvement budget, since without any plan there is
    nothing to fall back on.  Every later call shifts the previous plan
    into a guaranteed-feasible fallback before spending the given budget
    on improvement, so ``max_inner_iterations=0`` is always safe.
    """

    def __init__(self, design, gap_tol=1e-6, feas_tol=1e-10):
        self.design = design
        self.gap_tol = float(gap_tol)
        self.feas_tol = float(feas_tol)
        self._plan = None
        self._phi = None
        self._t = 0

    @property
    def plan(self):
        return self._plan

    @property
    def phi(self):
        return self._phi

    @property
    def t(self):
        return self._t

    def _solver_options(self, max_inner_iterations, deadline):
        # Full Hessian mode: the merit curvature of active quadratic
        # rows is what certifies empty level sets quickly, and for
        # all-affine problems the mode makes no difference anyway.
        return OptOptions(
            gap_tol=self.gap_tol,
            max_inner_iterations=max_inner_iterations,
            deadline=deadline,
            feas_options=FeasOptions(
                feas_tol=self.feas_tol,
                hessian_mode="full",
                max_iterations=2000,
            ),
        )

    def _find_initial_plan(self, problem, layout, x_now, deadline):
        """Any feasible plan for the budget-free initial problem."""
        design = self.design
        sc = design.scenario
        # Saturated terminal-gain rollout: often feasible already, and a
        # good start for the feasibility solve otherwise.
        x = np.asarray(x_now, dtype=float).reshape(sc.n)
        guesses = []
        for _ in range(sc.N):
            u = np.clip(
                design.K_term @ (x - design.x_r) + design.u_r,
                sc.u_min, sc.u_max,
            )
            guesses.append(u)
            x = step_state(sc.A, sc.B, x, u)
        z0 = layout.pack(design, make_plan(design, x_now, np.array(guesses)))
        res = solve_feasibility(
            problem.constraints, z0,
            FeasOptions(
                feas_tol=self.feas_tol, hessian_mode="full",
                max_iterations=_INIT_MAX_ITERATIONS, deadline=deadline,
            ),
        )
        if res.status != "feasible":
            raise InitializationError(
                f"no feasible plan found at the initial state "
                f"(solver status: {res.status})"
            )
        z_plan, extra = _polish_point(problem.constraints, res.x)
        plan = make_plan(self.design, x_now, layout.unpack(z_plan))
        if (plan_violation(self.design, plan) > _PLAN_TOL
                or design.terminal_value(plan.states[sc.N]) > _TERMINAL_TOL):
            raise InitializationError(
                "initial plan lost feasibility when regenerated from its inputs"
            )
        return plan, res.iterations + extra

    def step(self, x_now, max_inner_iterations=None, deadline=None):
        """Advance one period: fallback first, then optimize within budget.

        Parameters
        ----------
        x_now : (n,) array
            Measured state.  After the first step it must match the
            previous plan's prediction to 1e-6; the guarantees assume
            nominal dynamics.
        max_inner_iterations : int, optional
            Cap on inner Newton iterations spent improving this step.
            Zero skips optimization and applies the fallback unchanged.
        deadline : float, optional
            Absolute ``time.perf_counter()`` instant to stop by.

        Returns
        -------
        (u, StepDiagnostics)
            The input to apply and the step record.
        """
        design = self.design
        sc = design.scenario
        x_now = np.asarray(x_now, dtype=float).reshape(sc.n)

        init_iterations = 0
        if self._plan is None:
            problem, layout = build_mpc_problem(design, x_now, None)
            fallback, init_iterations = self._find_initial_plan(
                problem, layout, x_now, deadline
            )
            budget_value = None
        else:
            fallback = shift_plan(design, self._plan)
            mismatch = float(
                np.linalg.norm(x_now - fallback.states[0], ord=np.inf)
            )
            if mismatch > _STATE_MISMATCH_TOL:
                raise ValueError(
                    f"measured state is {mismatch:.3e} away from the "
                    "prediction; the feasibility hand-off does not survive "
                    "unmodeled dynamics"
                )
            if mismatch > 0.0:
                # Small drift: rebuild from the measurement, best effort.
                fallback = make_plan(design, x_now, fallback.inputs)
            problem, layout = build_mpc_problem(design, x_now, self._phi)
            f_plus_now = max(design.terminal_value(x_now), 0.0)
            budget_value = self._phi - f_plus_now

        z_fb = layout.pack(design, fallback)
        res = None
        solver_status = "skipped"
        if max_inner_iterations is None or max_inner_iterations > 0:
            try:
                res = solve(
                    problem,
                    self._solver_options(max_inner_iterations, deadline),
                    x0=z_fb,
                )
                solver_status = res.status
            except InfeasibleProblemError:
                # The problem is feasible by construction (the fallback
                # satisfies it); a rare false certificate must not cost
                # us the fallback.
                solver_status = "infeasible"

        chosen = fallback
        solver_iterations = 0 if res is None else res.inner_iterations
        if res is not None and res.feasible:
            z_cand = res.x
            if not np.array_equal(z_cand, z_fb):
                # A zero budget hands back the fallback point itself;
                # leave it untouched so the anytime floor stays bitwise.
                z_cand, extra = _polish_point(problem.constraints, z_cand)
                solver_iterations += extra
            candidate = make_plan(design, x_now, layout.unpack(z_cand))
            cost_ok = candidate.cost <= fallback.cost + 1e-9 * (
                1.0 + abs(fallback.cost)
            )
            budget_ok = budget_value is None or (
                compute_phi(design, candidate) <= budget_value + _PHI_TOL
            )
            if (cost_ok and budget_ok
                    and plan_violation(design, candidate) <= _PLAN_TOL
                    and design.terminal_value(candidate.states[sc.N])
                    <= _TERMINAL_TOL):
                chosen = candidate

        self._plan = chosen
        self._phi = compute_phi(design, chosen)
        diagnostics = StepDiagnostics(
            t=self._t,
            phi=self._phi,
            f_plus=max(design.terminal_value(x_now), 0.0),
            cost=chosen.cost,
            inner_iterations=init_iterations + solver_iterations,
            fallback_used=(
                self._t > 0 and bool(np.array_equal(chosen.inputs,
                                                    fallback.inputs))
            ),
            solver_status=solver_status,
        )
        self._t += 1
        return chosen.inputs[0].copy(), diagnostics
