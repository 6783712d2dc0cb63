"""End-to-end acceptance gate for the solver stack and the controller.

One test per shipping criterion, each printing a single summary line so a
verbose run reads as a checklist.  The tolerances and instance counts are
part of the contract; loosening them here is never the right fix.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from generators import (
    planted_qcqp,
    random_empty_set,
    random_feasible_set,
    random_psd,
    random_qp,
    random_tracking_design,
)
from oracles import fd_gradient, solve_qp_active_set

from anytime_mpc import (
    Budget,
    ConvexFunction,
    FeasOptions,
    FeasibilityProblem,
    OptOptions,
    OptimizationProblem,
    design_for_reference,
    load_example_scenario,
    load_example_terminal_polyhedron,
    load_example_terminal_set,
    run_closed_loop,
    solve,
    solve_feasibility,
    verify_records,
)
from anytime_mpc.optimize import initial_bounds
from anytime_mpc.terminal import (
    admissible_offsets,
    admissible_offsets_min,
    admissible_rows,
)


def test_qp_objective_matches_active_set_oracle():
    """100 random strictly convex QPs agree with KKT enumeration to 1e-5."""
    rng = np.random.default_rng(2024)
    tic = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        problem, (Q, q, c, A, rhs) = random_qp(rng)
        res = solve(problem, OptOptions(gap_tol=1e-6))
        assert res.converged
        _, v = solve_qp_active_set(Q, q, A, rhs)
        worst = max(worst, abs(res.objective_value - (v + c)))
        assert abs(res.objective_value - (v + c)) <= 1e-5
    elapsed = time.perf_counter() - tic
    assert elapsed < 10.0
    print(f"QP oracle equivalence: max |f - f*| = {worst:.2e} "
          f"over 100 instances in {elapsed:.1f}s")


def _planar_qcqp_oracle(Q0, q0, c0, P, z, radius, box):
    """Reference minimum for one quadratic constraint inside a box.

    Enumerates the cases a minimizer of a strictly convex quadratic can
    occupy: the interior stationary point, the swept quadratic boundary,
    and the closed-form minima on each box edge restricted to the
    feasible sub-interval.  The boundary sweep is a zooming fine grid in
    the boundary angle; everything else is exact arithmetic.
    """
    def f(pts):
        pts = np.atleast_2d(pts)
        return (0.5 * np.einsum("ij,jk,ik->i", pts, Q0, pts)
                + pts @ q0 + c0)

    def quad(pts):
        d = np.atleast_2d(pts) - z
        return 0.5 * np.einsum("ij,jk,ik->i", d, P, d) - radius

    best = np.inf
    x_u = np.linalg.solve(Q0, -q0)
    if quad(x_u)[0] <= 1e-12 and np.max(np.abs(x_u)) <= box + 1e-12:
        best = float(f(x_u)[0])

    # Swept boundary of the quadratic constraint, masked to the box.
    w, V = np.linalg.eigh(P)
    half_inv = V @ np.diag(w ** -0.5) @ V.T
    scale = math.sqrt(2.0 * radius)

    def boundary(thetas):
        u = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
        return z + scale * u @ half_inv

    lo, hi = 0.0, 2.0 * math.pi
    for level in range(4):
        thetas = np.linspace(lo, hi, 100001 if level == 0 else 4001)
        pts = boundary(thetas)
        vals = np.where(np.max(np.abs(pts), axis=1) <= box + 1e-12,
                        f(pts), np.inf)
        i = int(np.argmin(vals))
        if np.isfinite(vals[i]):
            best = min(best, float(vals[i]))
        step = thetas[1] - thetas[0]
        lo, hi = thetas[i] - 2.0 * step, thetas[i] + 2.0 * step

    # Box edges: a 1-D convex parabola over the sub-interval the
    # quadratic constraint leaves feasible; roots are closed form.
    for base, direction in [
        (np.array([box, 0.0]), np.array([0.0, 1.0])),
        (np.array([-box, 0.0]), np.array([0.0, 1.0])),
        (np.array([0.0, box]), np.array([1.0, 0.0])),
        (np.array([0.0, -box]), np.array([1.0, 0.0])),
    ]:
        d0 = base - z
        qa = 0.5 * float(direction @ P @ direction)
        qb = float(direction @ P @ d0)
        qc = 0.5 * float(d0 @ P @ d0) - radius
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0:
            continue  # edge never enters the feasible region
        t_lo = max((-qb - math.sqrt(disc)) / (2.0 * qa), -box)
        t_hi = min((-qb + math.sqrt(disc)) / (2.0 * qa), box)
        if t_lo > t_hi:
            continue
        fa = 0.5 * float(direction @ Q0 @ direction)
        fb = float(direction @ (Q0 @ base + q0))
        t_star = min(max(-fb / (2.0 * fa), t_lo), t_hi)
        for t in (t_lo, t_hi, t_star):
            best = min(best, float(f(base + t * direction)[0]))
    return best


def test_qcqp_objective_matches_grid_oracle():
    """50 planar instances with one quadratic constraint match grid search."""
    rng = np.random.default_rng(77)
    box = 2.0
    tic = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        P = random_psd(rng, 2)
        z = rng.uniform(-1.0, 1.0, 2)
        radius = rng.uniform(0.3, 1.5)  # value at z is -radius: feasible
        Q0 = random_psd(rng, 2)
        x_pull = rng.uniform(-3.0, 3.0, 2)
        q0 = -Q0 @ x_pull
        c0 = float(rng.standard_normal())
        ineqs = [
            ConvexFunction.quadratic(P, -P @ z,
                                     0.5 * float(z @ P @ z) - radius),
            ConvexFunction.affine([1.0, 0.0], -box),
            ConvexFunction.affine([-1.0, 0.0], -box),
            ConvexFunction.affine([0.0, 1.0], -box),
            ConvexFunction.affine([0.0, -1.0], -box),
        ]
        problem = OptimizationProblem(
            ConvexFunction.quadratic(Q0, q0, c0),
            FeasibilityProblem(2, ineqs),
        )
        res = solve(problem, OptOptions(gap_tol=1e-6))
        assert res.converged
        ref = _planar_qcqp_oracle(Q0, q0, c0, P, z, radius, box)
        worst = max(worst, abs(res.objective_value - ref))
        assert abs(res.objective_value - ref) <= 1e-4
    elapsed = time.perf_counter() - tic
    assert elapsed < 10.0
    print(f"QCQP grid equivalence: max |f - f_grid| = {worst:.2e} "
          f"over 50 instances in {elapsed:.1f}s")


def test_bisection_round_bound_and_strengthening():
    """Rounds never exceed the log2 bracket bound; bounds never hurt.

    The strengthened variant (dual and interpolation bounds) must finish
    in at most as many counted rounds as plain midpoint bisection on the
    same instance.
    """
    rng = np.random.default_rng(5)
    eps = 1e-6
    checked = 0
    saved = 0
    for trial in range(30):
        if trial % 3 == 2:
            problem, _, _ = planted_qcqp(rng)
        else:
            problem, _ = random_qp(rng)
        opts = OptOptions(gap_tol=eps)
        bracket, _ = initial_bounds(problem, feas_options=opts.feas_options)
        width = bracket.t_plus - bracket.t_minus
        allowed = (
            max(0, math.ceil(math.log2(width / eps))) if width > eps else 0
        )
        res_s = solve(problem, opts)
        res_v = solve(problem, OptOptions(gap_tol=eps, strengthened=False))
        # Plain midpoint probing may stall just above the target width
        # (its known resolution floor); it must still be feasible and
        # respect the round bound, and must never beat the strengthened
        # variant's count.
        assert res_s.converged
        assert res_v.feasible and res_v.max_violation <= 1e-8
        assert res_s.bisections <= allowed
        assert res_v.bisections <= allowed
        assert res_s.bisections <= res_v.bisections
        saved += res_v.bisections - res_s.bisections
        checked += 1
    print(f"bisection bound: {checked} instances within ceil(log2(w/eps)); "
          f"strengthening saved {saved} rounds total")


def test_feasibility_detection_on_constructed_sets():
    """50 sets built around a ball are found; 50 contradictions certified."""
    rng = np.random.default_rng(31)
    options = FeasOptions(feas_tol=1e-9, max_iterations=2000)
    worst = 0.0
    for _ in range(50):
        problem, center = random_feasible_set(rng)
        x0 = center + rng.uniform(-4.0, 4.0, problem.n)
        res = solve_feasibility(problem, x0, options)
        assert res.status == "feasible"
        worst = max(worst, res.max_violation)
        assert res.max_violation <= 1e-8
    for _ in range(50):
        problem = random_empty_set(rng)
        x0 = rng.uniform(-2.0, 2.0, problem.n)
        res = solve_feasibility(problem, x0, options)
        assert res.status == "empty"
    print(f"feasibility detection: 50/50 feasible (max violation "
          f"{worst:.1e}), 50/50 certified empty")


def test_merit_derivatives_match_finite_differences():
    """Analytic merit gradient and full-mode Hessian agree with FD."""
    rng = np.random.default_rng(8)
    grad_checked = 0
    hess_checked = 0
    worst_g = 0.0
    worst_h = 0.0
    while grad_checked < 1000:
        problem, center = random_feasible_set(rng)
        for _ in range(20):
            x = center + rng.uniform(-1.5, 1.5, problem.n)
            g = problem.merit_gradient(x)
            g_fd = fd_gradient(problem.merit, x)
            worst_g = max(worst_g, float(np.max(np.abs(g - g_fd))))
            assert np.max(np.abs(g - g_fd)) <= 1e-5
            grad_checked += 1

            f, _ = problem.residuals(x)
            if np.min(np.abs(f)) < 1e-2:
                continue  # too close to a kink for differencing
            H = problem.generalized_hessian(x, mode="full")
            h = 1e-6
            H_fd = np.zeros_like(H)
            for i in range(problem.n):
                e = np.zeros(problem.n)
                e[i] = h
                H_fd[:, i] = (
                    problem.merit_gradient(x + e)
                    - problem.merit_gradient(x - e)
                ) / (2.0 * h)
            worst_h = max(worst_h, float(np.max(np.abs(H - H_fd))))
            assert np.max(np.abs(H - H_fd)) <= 1e-4
            hess_checked += 1
    assert hess_checked >= 200
    print(f"derivative checks: gradient max err {worst_g:.1e} on "
          f"{grad_checked} points; Hessian max err {worst_h:.1e} on "
          f"{hess_checked} kink-free points")


def test_closed_loop_cost_reproduces_reference_tables():
    """Unbudgeted 11-step runs land within 5% of the published costs."""
    scenario = load_example_scenario()
    tic = time.perf_counter()
    results = {}
    for label, ts, target in [
        ("ellipsoid", load_example_terminal_set(), 8.7865),
        ("polyhedron", load_example_terminal_polyhedron(), 9.0075),
    ]:
        design = design_for_reference(scenario, ts, np.array([0.5]))
        run = run_closed_loop(design, Budget.unbounded())
        dev = (run.J - target) / target
        results[label] = (run.J, dev)
        assert abs(dev) <= 0.05
    elapsed = time.perf_counter() - tic
    assert elapsed < 30.0
    print("closed-loop cost: "
          + "; ".join(f"{k} J={v[0]:.4f} ({v[1]:+.2%} vs table)"
                      for k, v in results.items())
          + f"; {elapsed:.1f}s")


def test_anytime_guarantees_across_budget_grid():
    """Any per-step budget yields safe, accounting-decreasing runs.

    Checks, for budgets 0/5/20/100/unbounded: recorded bounds within
    1e-6, the slack-accounting chain within 1e-8, terminal violation
    settling below 1e-4 no later than step 100, and total cost
    nonincreasing as the budget grows.
    """
    design = design_for_reference(
        load_example_scenario(), load_example_terminal_set(),
        np.array([0.5]),
    )
    budgets = [
        Budget.iteration_cap(0),
        Budget.iteration_cap(5),
        Budget.iteration_cap(20),
        Budget.iteration_cap(100),
        Budget.unbounded(),
    ]
    costs = []
    settle = []
    for budget in budgets:
        run = run_closed_loop(design, budget, steps=102)
        assert verify_records(design, run.records,
                              bound_tol=1e-6, phi_slack=1e-8) == []
        f_plus = [r.f_plus for r in run.records]
        T = next(
            (t for t in range(len(f_plus))
             if all(v <= 1e-4 for v in f_plus[t:])),
            None,
        )
        assert T is not None and T <= 100
        settle.append(T)
        costs.append(run.J)
    for better, worse in zip(costs[1:], costs[:-1]):
        assert better <= worse + 1e-8
    print("anytime guarantees: J grid "
          + " >= ".join(f"{J:.3f}" for J in costs)
          + f"; settle steps {settle}")


def _support_over(H, k, direction):
    """Maximum of ``direction . x`` over ``{H x <= k}`` via an LP."""
    res = linprog(-np.asarray(direction, dtype=float), A_ub=H, b_ub=k,
                  bounds=(None, None), method="highs")
    assert res.status == 0, f"support LP failed: {res.message}"
    return -res.fun


def _check_polyhedron_invariant(ts, A_closed, rows, offsets, tol=1e-8):
    for i in range(ts.facets):
        # One closed-loop step keeps the set inside itself.
        assert _support_over(ts.H, ts.k, A_closed.T @ ts.H[i]) \
            <= ts.k[i] + tol
    for a, b in zip(rows, offsets):
        # The set never leaves the base constraint rows.
        assert _support_over(ts.H, ts.k, a) <= b + tol


def test_invariant_sets_certified_by_support_and_sampling():
    """Polyhedra are invariant by LP support checks; ellipsoid boundary
    points stay admissible."""
    # Planar case: the packaged example design.
    scenario = load_example_scenario()
    design = design_for_reference(
        scenario, load_example_terminal_polyhedron(), np.array([0.5])
    )
    A_cl = scenario.A + scenario.B @ design.K_term
    rows = admissible_rows(scenario.A, scenario.B, scenario.C,
                           design.K_term, scenario.S)
    offs = admissible_offsets_min(
        scenario.A, scenario.B, scenario.C, scenario.u_min, scenario.u_max,
        scenario.y_min, scenario.y_max, scenario.s,
        scenario.reference_vertices,
    )
    _check_polyhedron_invariant(design.terminal_set, A_cl, rows, offs)

    # A third-order random design exercises the same checks off the plane.
    rng = np.random.default_rng(12)
    design3 = random_tracking_design(rng, kind="polyhedron")
    while design3.scenario.n != 3:
        design3 = random_tracking_design(rng, kind="polyhedron")
    sc3 = design3.scenario
    A_cl3 = sc3.A + sc3.B @ design3.K_term
    rows3 = admissible_rows(sc3.A, sc3.B, sc3.C, design3.K_term, sc3.S)
    offs3 = admissible_offsets_min(
        sc3.A, sc3.B, sc3.C, sc3.u_min, sc3.u_max, sc3.y_min, sc3.y_max,
        sc3.s, sc3.reference_vertices,
    )
    _check_polyhedron_invariant(design3.terminal_set, A_cl3, rows3, offs3)

    # Ellipsoid: 200 boundary points satisfy every admissibility row.
    design_e = design_for_reference(
        scenario, load_example_terminal_set(), np.array([0.5])
    )
    ts = design_e.terminal_set
    rows_e = admissible_rows(scenario.A, scenario.B, scenario.C, ts.K,
                             scenario.S)
    offs_e = admissible_offsets(
        scenario.u_min, scenario.u_max, scenario.y_min, scenario.y_max,
        scenario.s, design_e.u_r, design_e.r,
    )
    w, V = np.linalg.eigh(ts.P)
    P_inv_half = V @ np.diag(w ** -0.5) @ V.T
    dirs = rng.standard_normal((200, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    boundary = math.sqrt(ts.rho) * dirs @ P_inv_half
    worst = float(np.max(boundary @ rows_e.T - offs_e))
    assert worst <= 1e-8
    print(f"invariant sets: n=2 ({design.terminal_set.facets} facets) and "
          f"n=3 ({design3.terminal_set.facets} facets) pass support checks; "
          f"ellipsoid boundary margin {worst:.1e} on 200 points")
