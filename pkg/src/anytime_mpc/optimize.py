"""Constrained convex minimization by level-set bisection.

``solve`` maintains a bracket ``[t_minus, t_plus]`` around the optimal value
together with a best feasible point ``x_F`` and, once one appears, an
infeasible witness ``x_I``.  Each round asks the feasibility solver whether
the level set ``S(t) = C intersect {f0(x) <= t}`` at the midpoint ``t`` has
a point.  A feasible answer pulls ``t_plus`` down, an emptiness certificate
pushes ``t_minus`` up, so the bracket at least halves every round.

With ``strengthened=True`` (the default) the plain midpoint updates are
replaced by sharper ones computed from the same by-products:

- an empty level set yields a stationary point ``x_I`` of the level-set
  merit, whose scaled violations are a dual-feasible multiplier vector, so
  the Lagrangian value there is a certified lower bound above ``t``;
- whenever ``x_I`` does not violate the constraints that are active at
  ``x_F``, interpolating the two points bounds the optimal value from above
  below ``f0(x_F)``.

Either way the midpoint guarantee is kept, so the bisection count never
exceeds ``ceil(log2(width / gap_tol))``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from anytime_mpc.convex import (
    ConvexFunction,
    FeasibilityProblem,
    OptimizationProblem,
)
from anytime_mpc.feasibility import (
    FeasOptions,
    solve_feasibility,
    with_budget,
)

__all__ = [
    "Bracket",
    "OptOptions",
    "OptResult",
    "InfeasibleProblemError",
    "UnboundedProblemError",
    "BudgetExhaustedError",
    "level_set_problem",
    "dual_lower_bound",
    "interpolation_upper_bound",
    "initial_bounds",
    "solve",
]


class InfeasibleProblemError(RuntimeError):
    """The constraint set was certified empty."""


class UnboundedProblemError(RuntimeError):
    """No finite lower bound on the objective could be established."""


class BudgetExhaustedError(RuntimeError):
    """Initial bracketing ran out of budget before producing a bracket."""

    def __init__(self, message, x=None, iterations=0):
        super().__init__(message)
        self.x = x
        self.iterations = iterations


@dataclass(frozen=True)
class Bracket:
    """Certified objective bounds plus the points that produced them.

    ``t_minus <= f* <= t_plus`` where ``f*`` is the optimal value; ``x_F``
    is feasible with ``f0(x_F) = t_plus`` (up to solver tolerance) and
    ``x_I`` is the latest infeasible witness, or None before one exists.
    """

    t_minus: float
    t_plus: float
    x_F: np.ndarray
    x_I: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.t_minus <= self.t_plus + 1e-9:
            raise ValueError(
                f"invalid bracket: t_minus={self.t_minus} > t_plus={self.t_plus}"
            )

    @property
    def width(self):
        return max(0.0, self.t_plus - self.t_minus)


@dataclass(frozen=True)
class OptOptions:
    """Tuning knobs for :func:`solve`.

    ``gap_tol`` is the bracket width at which bisection stops.  The inner
    feasibility solves run with ``feas_options``; their default tolerance is
    one decade below the standalone default so that level-set slop stays
    well inside the outer gap.  ``max_inner_iterations`` caps the *total*
    Newton steps across all inner solves, which is the anytime budget knob.
    ``strengthened=False`` falls back to plain midpoint bracket updates.
    """

    gap_tol: float = 1e-6
    max_bisections: int = 200
    max_inner_iterations: Optional[int] = None
    deadline: Optional[float] = None
    strengthened: bool = True
    feas_options: FeasOptions = field(
        default_factory=lambda: FeasOptions(feas_tol=1e-9)
    )

    def __post_init__(self):
        if self.gap_tol <= 0.0:
            raise ValueError("gap_tol must be positive")
        if self.max_bisections < 0:
            raise ValueError("max_bisections must be nonnegative")


@dataclass(frozen=True)
class OptResult:
    """Outcome of :func:`solve`.

    ``x`` is the best feasible point found; ``gap = t_plus - t_minus`` of
    the final bracket bounds its suboptimality.  ``feasible`` is False only
    when the budget ran out before any feasible point appeared, in which
    case ``x`` is the last iterate and ``gap`` is infinite.  ``bisections``
    counts rounds that shrank the bracket by at least half;
    ``rescued_rounds`` counts inconclusive rounds salvaged by a dual bound
    that moved the lower side less than that.
    """

    status: str
    x: np.ndarray
    objective_value: float
    gap: float
    bisections: int
    inner_iterations: int
    feasible: bool
    max_violation: float
    bracket: Optional[Bracket]
    rescued_rounds: int = 0

    @property
    def converged(self):
        return self.status == "converged"


def level_set_problem(problem, t):
    """Constraints of ``problem`` with the cut ``f0(x) - t <= 0`` appended.

    The cut is always the last inequality, so its multiplier is easy to
    locate in the level-set merit by-products.
    """
    cons = problem.constraints
    cut = problem.objective.shifted(-t)
    return FeasibilityProblem(
        cons.n, list(cons.inequalities) + [cut], cons.equalities
    )


def dual_lower_bound(problem, x, t):
    """Lower bound on the optimal value from an empty-level-set witness.

    At a merit-stationary point ``x`` of the level set at ``t`` with
    ``f0(x) > t``, dividing the stationarity relation by the positive cut
    violation shows that ``mu = max(f(x),0) / (f0(x)-t)`` (and the analogous
    equality multipliers) is dual feasible, so the Lagrangian value

        f0(x) + sum_i mu_i f_i(x) + sum_j nu_j (c_j'x - d_j)

    bounds the optimum from below.  Raises ``ValueError`` when
    ``f0(x) - t`` is below 1e-12, where the division is meaningless.
    """
    denom = problem.objective.value(x) - t
    if denom < 1e-12:
        raise ValueError(
            f"cut violation f0(x) - t = {denom:.3e} too small for a dual bound"
        )
    # mu_i f_i + nu_j e_j sums to twice the constraint merit over the
    # denominator: positive parts square, equality residuals square.
    return problem.objective.value(x) + 2.0 * problem.constraints.merit(x) / denom


def interpolation_upper_bound(problem, x_F, x_I, feas_tol=1e-8):
    """Upper bound on the optimum by interpolating x_F toward x_I.

    Let ``Gamma`` be the largest ratio of a violation at ``x_I`` to the
    slack at ``x_F`` over the constraints inactive at ``x_F``.  Stepping
    from ``x_F`` toward ``x_I`` by ``lam = 1 / (Gamma + 1)`` keeps every
    constraint satisfied, and by convexity the objective there is at most

        (Gamma * f0(x_F) + f0(x_I)) / (Gamma + 1).

    Returns ``(bound, x_lam)`` with the feasible interpolate realizing the
    bound.  The construction needs ``x_I`` to respect every constraint
    active at ``x_F`` (and the equalities); when that fails, returns None.
    """
    cons = problem.constraints
    f_F, e_F = cons.residuals(x_F)
    f_I, e_I = cons.residuals(x_I)
    if e_F.size and np.abs(e_F).max() > feas_tol:
        return None
    if e_I.size and np.abs(e_I).max() > feas_tol:
        return None
    if f_F.size and f_F.max() > feas_tol:
        return None
    active = np.abs(f_F) <= feas_tol
    if np.any(f_I[active] > feas_tol):
        return None
    inactive = f_F < -feas_tol
    if np.any(inactive):
        gamma = max(0.0, float((f_I[inactive] / (-f_F[inactive])).max()))
    else:
        gamma = 0.0
    lam = 1.0 / (gamma + 1.0)
    x_lam = (1.0 - lam) * np.asarray(x_F, float) + lam * np.asarray(x_I, float)
    v_F = problem.objective.value(x_F)
    v_I = problem.objective.value(x_I)
    return (gamma * v_F + v_I) / (gamma + 1.0), x_lam


# An emptiness certificate is only trusted when the stationary point's
# violations are this many times the feasibility tolerance.  Below that the
# level set may simply be thin (the midpoint sits within solver noise of
# the optimal value) and the stalled point is treated as feasible instead;
# its objective value is still a valid upper bound up to violation-sized
# slop, far below the bisection gap tolerance.
_TRUSTED_EMPTY_FACTOR = 100.0
# Dual bounds divide the stationarity residual by the cut violation, so
# they are only used when that denominator is large enough not to amplify
# solver noise into an invalid bound.
_DUAL_DENOM_MIN = 1e-6

# Cap on dual-bound rescues of stalled bisection rounds per solve; rounds
# that do not at least halve the bracket are not counted as bisections,
# so without a cap a barely-moving bound could spin forever.
_MAX_RESCUES = 50


def _classify(result, feas_tol):
    floor = 0.5 * (_TRUSTED_EMPTY_FACTOR * feas_tol) ** 2
    if result.status == "feasible":
        return "feasible"
    if result.status == "empty":
        return "empty" if result.merit >= floor else "near_feasible"
    if result.merit < floor:
        # A stalled solve that nearly reached the set: usable as an
        # incumbent for the same reason a small-merit "empty" is.
        return "near_feasible"
    return "budget"


def _guarded_dual_bound(problem, x, t):
    """Dual lower bound, or ``t`` itself when the bound is not trustworthy."""
    if problem.objective.value(x) - t < _DUAL_DENOM_MIN:
        return t
    try:
        return dual_lower_bound(problem, x, t)
    except ValueError:
        return t


def _unconstrained_minimizer(objective):
    """Stationary point of the objective, or None when none exists."""
    Q, q = objective.Q, objective.q
    if Q is None:
        return None
    try:
        x = cho_solve(cho_factor(Q, lower=True), -q)
        return x
    except np.linalg.LinAlgError:
        pass
    x = np.linalg.lstsq(Q, -q, rcond=None)[0]
    residual = float(np.linalg.norm(Q @ x + q))
    if residual <= 1e-9 * (1.0 + float(np.linalg.norm(q))):
        return x
    return None


def _dual_feasibility_bound(problem, x_start, feas_options):
    """Lower bound via a feasibility solve on the stationarity system.

    For affine inequalities ``Ax + c <= 0`` and equalities ``Ex = d``
    searches for ``(x, mu, nu)`` with ``grad f0(x) + A'mu + E'nu = 0`` and
    ``mu >= 0``; the Lagrangian at any such triple is its own infimum over
    ``x`` and hence a lower bound.  Returns ``(t_minus, x, iterations)``.
    Emptiness of this system, combined with a feasible primal, means the
    objective is unbounded below over the constraint set, which is raised.
    """
    cons = problem.constraints
    n, m, p = cons.n, cons.m, cons.m_eq
    A = np.array([f.q for f in cons.inequalities]).reshape(m, n)
    c = np.array([f.c for f in cons.inequalities]).reshape(m)
    eq_pairs = cons.equalities
    E = np.array([a for a, _ in eq_pairs]).reshape(p, n)
    d = np.array([b for _, b in eq_pairs]).reshape(p)
    Q0 = problem.objective.Q
    q0 = problem.objective.q
    dim = n + m + p
    equalities = []
    for r in range(n):
        row = np.zeros(dim)
        if Q0 is not None:
            row[:n] = Q0[r]
        row[n:n + m] = A[:, r]
        if p:
            row[n + m:] = E[:, r]
        equalities.append((row, -q0[r]))
    sign_rows = []
    for i in range(m):
        e = np.zeros(dim)
        e[n + i] = -1.0
        sign_rows.append(ConvexFunction.affine(e, 0.0))
    system = FeasibilityProblem(dim, sign_rows, equalities)
    z0 = np.concatenate([x_start, np.zeros(m + p)])
    res = solve_feasibility(system, z0, feas_options)
    if res.status == "empty":
        raise UnboundedProblemError(
            "no dual-feasible multipliers exist; the objective is unbounded "
            "below over the constraint set"
        )
    if res.status != "feasible":
        return None, None, res.iterations
    x = res.x[:n]
    mu = np.maximum(res.x[n:n + m], 0.0)
    nu = res.x[n + m:]
    bound = problem.objective.value(x) + float(mu @ (A @ x + c))
    if p:
        bound += float(nu @ (E @ x - d))
    return bound, x, res.iterations


def initial_bounds(problem, x0=None, feas_options=None,
                   max_iterations=None, deadline=None):
    """Build a starting bracket: feasible point above, certified bound below.

    Returns ``(bracket, iterations)`` with the Newton steps spent.  The
    upper side is a plain feasibility solve on the constraints.  The lower
    side tries, in order: the unconstrained objective minimizer (when the
    quadratic part determines one), a dual-feasibility solve (all-affine
    constraints), and downward probing of level sets with doubling stride,
    where each empty answer certifies a bound.

    Raises ``InfeasibleProblemError`` when the constraint set is empty,
    ``UnboundedProblemError`` when probing finds no finite bound, and
    ``BudgetExhaustedError`` when the budget ends before a bracket exists.
    """
    if feas_options is None:
        feas_options = FeasOptions()
    cons = problem.constraints
    f0 = problem.objective.value
    spent = 0

    def opts(cap=None):
        rem = None if max_iterations is None else max(max_iterations - spent, 0)
        if cap is not None:
            rem = cap if rem is None else min(rem, cap)
        return with_budget(feas_options, rem, deadline)

    x_start = np.zeros(cons.n) if x0 is None else np.asarray(x0, dtype=float)
    res = solve_feasibility(cons, x_start, opts())
    spent += res.iterations
    kind = _classify(res, feas_options.feas_tol)
    if kind == "empty":
        raise InfeasibleProblemError("constraint set is empty")
    if kind == "budget":
        raise BudgetExhaustedError(
            "budget ran out before a feasible point was found",
            x=res.x,
            iterations=spent,
        )
    x_F = res.x
    t_plus = f0(x_F)

    t_minus = None
    x_I = None
    x_u = _unconstrained_minimizer(problem.objective)
    if x_u is not None:
        t_minus = f0(x_u)
        if cons.max_violation(x_u) <= feas_options.feas_tol:
            # The global minimizer is feasible; the bracket is already tight.
            bracket = Bracket(t_minus, t_minus, x_u, x_I)
            return bracket, spent
        x_I = x_u
    elif all(f.is_affine for f in cons.inequalities):
        tight = with_budget(
            FeasOptions(
                feas_tol=min(feas_options.feas_tol, 1e-10),
                hessian_mode="gauss_newton",
            ),
            None if max_iterations is None else max(max_iterations - spent, 0),
            deadline,
        )
        bound, x_d, used = _dual_feasibility_bound(problem, x_F, tight)
        spent += used
        if bound is not None:
            t_minus = bound
            x_I = x_d

    if t_minus is None:
        # Probe level sets downward with doubling stride; the first empty
        # answer certifies a lower bound.
        stride = max(1.0, 0.5 * abs(t_plus))
        x_probe = x_F
        for _ in range(64):
            t_probe = t_plus - stride
            r = solve_feasibility(
                level_set_problem(problem, t_probe), x_probe, opts()
            )
            spent += r.iterations
            kind = _classify(r, feas_options.feas_tol)
            if kind == "empty":
                x_I = r.x
                t_minus = max(t_probe, _guarded_dual_bound(problem, r.x, t_probe))
                break
            if kind in ("feasible", "near_feasible"):
                x_F = r.x
                t_plus = min(t_plus, f0(x_F))
                x_probe = r.x
                stride *= 2.0
                continue
            raise BudgetExhaustedError(
                "budget ran out while probing for a lower bound",
                x=x_F,
                iterations=spent,
            )
        else:
            raise UnboundedProblemError(
                "no empty level set found after 64 doubling probes; "
                "objective appears unbounded below"
            )

    t_minus = min(t_minus, t_plus)
    return Bracket(t_minus, t_plus, x_F, x_I), spent


def solve(problem, options=None, warm=None, x0=None, trace=None):
    """Minimize ``problem`` to a certified gap by level-set bisection.

    Parameters
    ----------
    problem : OptimizationProblem
    options : OptOptions, optional
    warm : Bracket, optional
        A pre-built bracket; ``warm.x_F`` must be feasible.  When given,
        initial bracketing is skipped entirely, which is how the MPC layer
        hands over its fallback plan.
    x0 : array, optional
        Start point for initial bracketing (ignored with ``warm``).
    trace : list, optional
        When given, one dict per bisection round is appended with the
        probed level, the round outcome, the bracket after the update,
        and the cumulative inner iteration count.

    Returns
    -------
    OptResult
        ``status="converged"`` once the bracket width is at most
        ``gap_tol``; ``"budget_exhausted"`` otherwise, in which case ``x``
        is still the best feasible point seen so far whenever one exists.
    """
    if options is None:
        options = OptOptions()
    if not isinstance(problem, OptimizationProblem):
        raise TypeError("problem must be an OptimizationProblem")
    f0 = problem.objective.value
    cons = problem.constraints
    inner = 0
    bisections = 0

    def remaining():
        if options.max_inner_iterations is None:
            return None
        return max(options.max_inner_iterations - inner, 0)

    def out_of_budget():
        if bisections >= options.max_bisections:
            return True
        rem = remaining()
        if rem is not None and rem <= 0:
            return True
        if options.deadline is not None and time.perf_counter() >= options.deadline:
            return True
        return False

    if warm is None:
        try:
            bracket, used = initial_bounds(
                problem,
                x0=x0,
                feas_options=options.feas_options,
                max_iterations=options.max_inner_iterations,
                deadline=options.deadline,
            )
        except BudgetExhaustedError as err:
            x = err.x if err.x is not None else np.zeros(cons.n)
            return OptResult(
                status="budget_exhausted",
                x=x,
                objective_value=f0(x),
                gap=math.inf,
                bisections=0,
                inner_iterations=err.iterations,
                feasible=cons.max_violation(x) <= options.feas_options.feas_tol,
                max_violation=cons.max_violation(x),
                bracket=None,
            )
        inner += used
    else:
        bracket = warm

    t_minus, t_plus = bracket.t_minus, bracket.t_plus
    x_F = np.asarray(bracket.x_F, dtype=float)
    x_I = None if bracket.x_I is None else np.asarray(bracket.x_I, dtype=float)
    x_warm = x_F
    status = "converged"

    rescues = 0

    def note(label, t_probe):
        if trace is not None:
            trace.append({
                "round": len(trace) + 1,
                "t": t_probe,
                "kind": label,
                "t_minus": t_minus,
                "t_plus": t_plus,
                "inner_iterations": inner,
            })

    while t_plus - t_minus > options.gap_tol:
        if out_of_budget():
            status = "budget_exhausted"
            break
        t = 0.5 * (t_minus + t_plus)
        level = level_set_problem(problem, t)
        r = solve_feasibility(
            level, x_warm, with_budget(options.feas_options, remaining(),
                                       options.deadline)
        )
        inner += r.iterations
        kind = _classify(r, options.feas_options.feas_tol)
        if kind == "budget":
            # A stalled round proved nothing about the midpoint, but its
            # iterate still defines dual multipliers, and a Lagrangian
            # bound from them can move the lower side soundly where a raw
            # emptiness claim would be unsafe.  Such rounds are tracked
            # apart from bisections (they need not halve the bracket) and
            # capped.
            rescued = False
            if (options.strengthened and rescues < _MAX_RESCUES
                    and r.reason in ("stalled", "line_search")):
                bound = _guarded_dual_bound(problem, r.x, t)
                if bound > t_minus:
                    rescues += 1
                    t_minus = min(bound, t_plus)
                    x_warm = r.x
                    x_I = r.x
                    rescued = True
            note("rescued" if rescued else "budget", t)
            if not rescued:
                status = "budget_exhausted"
                break
            continue
        x_warm = r.x
        if kind in ("feasible", "near_feasible"):
            x_F = r.x
            if options.strengthened:
                t_new = f0(x_F)
                if x_I is not None:
                    interp = interpolation_upper_bound(problem, x_F, x_I)
                    if interp is not None:
                        b, x_lam = interp
                        v_lam = min(b, f0(x_lam))
                        if v_lam < t_new:
                            # The interpolate is feasible and beats the
                            # solver's point; adopt it as incumbent.
                            x_F = x_lam
                            t_new = v_lam
                t_plus = min(t_plus, t_new)
            else:
                t_plus = min(t_plus, t)
        else:
            x_I = r.x
            if options.strengthened:
                t_minus = max(t_minus, t, _guarded_dual_bound(problem, x_I, t))
                interp = interpolation_upper_bound(problem, x_F, x_I)
                if interp is not None:
                    b, x_lam = interp
                    v_lam = min(b, f0(x_lam))
                    if v_lam < t_plus:
                        x_F = x_lam
                        t_plus = v_lam
            else:
                t_minus = max(t_minus, t)
        if t_minus > t_plus:
            t_minus = t_plus
        bisections += 1
        note("feasible" if kind in ("feasible", "near_feasible") else "empty",
             t)

    # A near-feasible round may have left the incumbent with violations a
    # little above tolerance; pull it back onto the constraint set.
    if cons.max_violation(x_F) > options.feas_options.feas_tol:
        rem = remaining()
        cap = 50 if rem is None else min(rem, 50)
        if cap > 0:
            pol = solve_feasibility(
                cons, x_F, with_budget(options.feas_options, cap, options.deadline)
            )
            inner += pol.iterations
            if pol.status == "feasible":
                x_F = pol.x
                t_plus = min(t_plus, f0(x_F))
                if t_minus > t_plus:
                    t_minus = t_plus

    return OptResult(
        status=status,
        x=x_F.copy(),
        objective_value=f0(x_F),
        gap=max(0.0, t_plus - t_minus),
        bisections=bisections,
        inner_iterations=inner,
        feasible=True,
        max_violation=cons.max_violation(x_F),
        bracket=Bracket(min(t_minus, t_plus), t_plus, x_F.copy(), x_I),
        rescued_rounds=rescues,
    )
