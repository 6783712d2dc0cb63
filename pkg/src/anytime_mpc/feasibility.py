"""Piecewise-smooth Newton iteration for convex feasibility.

Given ``C = {x : f_i(x) <= 0, c_j'x = d_j}`` the solver minimizes the merit
``F(x) = 0.5 ||max(f(x), 0)||^2 + 0.5 ||Cx - d||^2``.  Three outcomes are
possible:

- ``F`` reaches (numerical) zero: the iterate is a point of ``C``;
- the gradient becomes too small to account for the remaining merit within
  a trust radius: by convexity the merit's infimum is positive there,
  certifying ``C`` empty;
- iteration, deadline, or line-search budget runs out first.

Each step solves the regularized Newton system ``(H + delta I) d = -grad F``
with ``delta`` proportional to the gradient norm, then backtracks with an
Armijo test.  ``H`` is a generalized Hessian of ``F`` restricted to the
currently active constraints, so the iteration handles the kinks of
``max(., 0)`` without smoothing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from anytime_mpc.convex import FeasibilityProblem

__all__ = [
    "FeasOptions",
    "FeasResult",
    "LineSearchError",
    "armijo_step_size",
    "newton_direction",
    "solve_feasibility",
]


class LineSearchError(RuntimeError):
    """Backtracking exhausted its halvings without sufficient decrease."""


@dataclass(frozen=True)
class FeasOptions:
    """Tuning knobs for :func:`solve_feasibility`.

    ``sigma`` is the Armijo sufficient-decrease fraction, valid on (0, 0.5);
    ``zeta`` scales the gradient-norm-proportional Newton regularization,
    valid on (0, 1).  ``feas_tol`` bounds the worst constraint violation a
    point may have to count as feasible; ``grad_tol`` is the stationarity
    threshold used for emptiness certification.  ``deadline`` is an absolute
    ``time.perf_counter()`` value after which the solver stops.
    """

    sigma: float = 0.1
    zeta: float = 0.5
    feas_tol: float = 1e-8
    grad_tol: float = 1e-10
    max_iterations: int = 500
    max_halvings: int = 50
    hessian_mode: str = "full"
    deadline: float | None = None
    record_trace: bool = False

    def __post_init__(self):
        if not 0.0 < self.sigma < 0.5:
            raise ValueError("sigma must lie in (0, 0.5)")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.feas_tol <= 0.0 or self.grad_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 0 or self.max_halvings < 0:
            raise ValueError("iteration budgets must be nonnegative")
        if self.hessian_mode not in ("full", "gauss_newton"):
            raise ValueError(f"unknown Hessian mode {self.hessian_mode!r}")


@dataclass(frozen=True)
class FeasResult:
    """Outcome of a feasibility solve.

    ``status`` is ``"feasible"``, ``"empty"``, or ``"budget_exhausted"``;
    ``x`` is the final iterate (a point of the set when feasible, the merit
    minimizer candidate when empty).  ``iterations`` counts Newton steps
    actually taken.  For ``"budget_exhausted"``, ``reason`` says what ran
    out: ``"iterations"``, ``"deadline"``, ``"line_search"``, or
    ``"stalled"`` (progress died without an emptiness certificate; the
    iterate may still be informative).  ``trace`` holds per-iteration rows
    ``(k, merit, grad_norm, step_size, active_count)`` when requested.
    """

    status: str
    x: np.ndarray
    merit: float
    max_violation: float
    iterations: int
    reason: str = ""
    trace: list = field(default_factory=list, repr=False)

    @property
    def feasible(self):
        return self.status == "feasible"


def newton_direction(problem, x, active, zeta, mode="full"):
    """Solve ``(H_active + zeta ||g|| I) d = -g`` for the search direction.

    The regularization keeps the system positive definite (the generalized
    Hessian is only semidefinite) and vanishes as the gradient does, so the
    local convergence rate is unaffected.  Raises ``ValueError`` at
    stationary points, where no direction is defined.
    """
    g = problem.merit_gradient(x)
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        raise ValueError("gradient is zero; no Newton direction exists")
    H = problem.generalized_hessian(x, mode=mode, active=active)
    delta = zeta * g_norm
    H_reg = H + delta * np.eye(problem.n)
    try:
        d = cho_solve(cho_factor(H_reg, lower=True), -g)
    except np.linalg.LinAlgError:
        # The shifted matrix is PD in exact arithmetic; fall back to a
        # least-squares solve if rounding made the factorization fail.
        d = np.linalg.lstsq(H_reg, -g, rcond=None)[0]
    return d


# Relative evaluation-noise allowance in the Armijo test.  Near a merit
# stationary point the true per-step decrease can drop below floating-point
# noise in F; without this slack the line search rejects full Newton steps
# there and the iteration crawls instead of converging quadratically.
_ARMIJO_NOISE_REL = 1e-13


def armijo_step_size(problem, x, d, sigma, max_halvings=50):
    """Largest step ``2**-i`` satisfying the Armijo decrease condition.

    Accepts ``tau`` once ``F(x + tau d) <= F(x) + sigma tau grad F'd`` holds
    up to a relative evaluation-noise allowance.  The directional derivative
    must be negative; a nonnegative slope means the direction is not a
    descent direction and is reported as an error.
    """
    F0 = problem.merit(x)
    slope = float(problem.merit_gradient(x) @ d)
    if slope >= 0.0:
        raise LineSearchError(f"directional derivative {slope:.3e} is not negative")
    slack = _ARMIJO_NOISE_REL * F0
    tau = 1.0
    for _ in range(max_halvings + 1):
        if problem.merit(x + tau * d) <= F0 + sigma * tau * slope + slack:
            return tau
        tau *= 0.5
    raise LineSearchError(
        f"no sufficient decrease within {max_halvings} halvings"
    )


# A stationary merit value must clear this multiple of the feasibility
# tolerance's natural merit scale before the set is declared empty; points
# stalled in between get the inconclusive budget_exhausted status instead.
_EMPTY_MERIT_FACTOR = 10.0

# Emptiness certificate: by convexity F* >= F(x) - ||grad F(x)|| * dist,
# so F(x) > ||grad F(x)|| * R proves the merit cannot vanish within
# distance R of the iterate.  A small gradient alone proves nothing: the
# merit can be almost flat (curvature of order violation * constraint
# curvature), leaving a near-feasible iterate with a tiny gradient while
# the set is nonempty.  The radius bounds how far a feasible point may
# sit from the iterate for the certificate to be conclusive; problems
# here are unit-to-hundreds scale, so 1e3 is generous.
_CERTIFICATE_RADIUS = 1e3

# Steps below this size mean the Newton model is not trusted by the line
# search; the regularization is then escalated (shrinking the direction
# toward scaled steepest descent) until an honest step is accepted.  This
# rescues iterates pinned in shallow creases of the piecewise merit where
# the one-piece quadratic model is wildly wrong at range.
_TAU_HEALTHY = 2.0**-20
_MAX_REG_ESCALATIONS = 12

# Steps whose relative merit decrease stays below this are not progress,
# only floating-point noise let through by the line-search slack.  Several
# such steps in a row mean the merit cannot be reduced further at this
# precision, so the iterate is judged stationary: the certificate above
# decides between "empty" and an inconclusive stall.
_PROGRESS_RTOL = 1e-12
_STALL_LIMIT = 3


def solve_feasibility(problem, x0, options=None):
    """Find a point of ``problem`` or certify it empty, by Newton descent.

    Parameters
    ----------
    problem : FeasibilityProblem
    x0 : (n,) array
        Starting iterate; any point is acceptable.
    options : FeasOptions, optional

    Returns
    -------
    FeasResult
        With ``status="feasible"`` the returned point violates no constraint
        by more than ``feas_tol``.  With ``status="empty"`` the merit value
        exceeds what the gradient norm could still give away over the
        certificate radius, which by convexity proves the merit has no zero
        nearby; the verdict fires once the gradient falls below ``grad_tol``
        or the decrease stalls at the floating-point floor.  Otherwise
        ``status="budget_exhausted"`` with ``reason`` set: iterations, the
        deadline, the line search, or achievable precision ran out before
        either conclusion.
    """
    if options is None:
        options = FeasOptions()
    if not isinstance(problem, FeasibilityProblem):
        raise TypeError("problem must be a FeasibilityProblem")
    x = np.array(x0, dtype=float).reshape(-1)
    if x.shape != (problem.n,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({problem.n},)")

    trace = []
    empty_merit_floor = _EMPTY_MERIT_FACTOR * 0.5 * options.feas_tol**2
    iterations = 0
    stalls = 0
    merit_x = problem.merit(x)

    def result(status, reason=""):
        return FeasResult(
            status=status,
            x=x.copy(),
            merit=problem.merit(x),
            max_violation=problem.max_violation(x),
            iterations=iterations,
            reason=reason,
            trace=trace,
        )

    def certified_empty(g_norm):
        return (merit_x > empty_merit_floor
                and merit_x > g_norm * _CERTIFICATE_RADIUS)

    while True:
        if problem.max_violation(x) <= options.feas_tol:
            return result("feasible")
        g = problem.merit_gradient(x)
        g_norm = float(np.linalg.norm(g))
        if g_norm <= options.grad_tol and certified_empty(g_norm):
            return result("empty")
        if g_norm == 0.0:
            # Exactly stationary without a certificate: no direction
            # exists and nothing can be concluded.
            return result("budget_exhausted", reason="stalled")
        if stalls >= _STALL_LIMIT:
            # The merit has hit its floating-point floor without reaching
            # feasibility; certify emptiness if possible, else give up.
            if certified_empty(g_norm):
                return result("empty")
            return result("budget_exhausted", reason="stalled")
        if iterations >= options.max_iterations:
            return result("budget_exhausted", reason="iterations")
        if options.deadline is not None and time.perf_counter() >= options.deadline:
            return result("budget_exhausted", reason="deadline")

        active = problem.active_set(x)
        step = None
        boost = 1.0
        for _ in range(_MAX_REG_ESCALATIONS + 1):
            d = newton_direction(
                problem, x, active, options.zeta * boost,
                mode=options.hessian_mode,
            )
            try:
                tau = armijo_step_size(
                    problem, x, d, options.sigma, options.max_halvings
                )
            except LineSearchError:
                tau = None
            if tau is not None:
                step = (d, tau)
                if tau >= _TAU_HEALTHY:
                    break
            boost *= 10.0
        if step is None:
            return result("budget_exhausted", reason="line_search")
        d, tau = step
        x = x + tau * d
        iterations += 1
        merit_new = problem.merit(x)
        if merit_new <= merit_x - _PROGRESS_RTOL * merit_x:
            stalls = 0
        else:
            stalls += 1
        merit_x = merit_new
        if options.record_trace:
            trace.append(
                (
                    iterations,
                    merit_new,
                    float(np.linalg.norm(problem.merit_gradient(x))),
                    tau,
                    int(active.size),
                )
            )


def with_budget(options, max_iterations=None, deadline=None):
    """Copy ``options`` with a tightened iteration cap and/or deadline."""
    updates = {}
    if max_iterations is not None:
        updates["max_iterations"] = min(options.max_iterations, max_iterations)
    if deadline is not None:
        updates["deadline"] = (
            deadline
            if options.deadline is None
            else min(options.deadline, deadline)
        )
    return replace(options, **updates) if updates else options
