"""Tests for the horizon problem builder, plan accounting, and controller."""

import numpy as np
import pytest

from anytime_mpc import (
    AnytimeController,
    InitializationError,
    Plan,
    build_mpc_problem,
    compute_phi,
    design_for_reference,
    load_example_scenario,
    load_example_terminal_polyhedron,
    load_example_terminal_set,
    make_plan,
    plan_violation,
    shift_plan,
    step_state,
)
from anytime_mpc.mpc import PlanLayout, open_loop_cost

from generators import random_tracking_design

REF = np.array([0.5])


def benchmark_design(kind="ellipsoid"):
    scenario = load_example_scenario()
    terminal = (
        load_example_terminal_set()
        if kind == "ellipsoid"
        else load_example_terminal_polyhedron()
    )
    return design_for_reference(scenario, terminal, REF)


def feedback_rollout(design, x0):
    """Plan from saturated terminal-gain feedback, exact by construction."""
    sc = design.scenario
    x = np.asarray(x0, dtype=float)
    inputs = []
    for _ in range(sc.N):
        u = np.clip(
            design.K_term @ (x - design.x_r) + design.u_r, sc.u_min, sc.u_max
        )
        inputs.append(u)
        x = step_state(sc.A, sc.B, x, u)
    return make_plan(design, x0, np.array(inputs))


def constraint_values_oracle(design, x_now, plan, eps, phi_prev):
    """Inequality values in the documented row order, from trajectories."""
    sc = design.scenario
    vals = []
    for k in range(sc.N):
        u = plan.inputs[k]
        y = sc.C @ plan.states[k + 1]
        vals.extend(u - sc.u_max)
        vals.extend(sc.u_min - u)
        vals.extend(y - sc.y_max)
        vals.extend(sc.y_min - y)
    fns = design.terminal_functions()
    vals.extend(fn.value(plan.states[sc.N]) for fn in fns)
    for k in range(1, sc.N):
        vals.extend(fn.value(plan.states[k]) - eps[k - 1] for fn in fns)
    vals.extend(-eps[k - 1] for k in range(1, sc.N))
    if phi_prev is not None:
        f_plus = max(design.terminal_value(x_now), 0.0)
        vals.append(float(np.sum(eps)) - (phi_prev - f_plus))
    return np.array(vals)


# ---------------------------------------------------------------------------
# decision-vector layout


def test_layout_indexing():
    layout = PlanLayout(4, 2, 1, 3)
    assert layout.n_z == 4 + 8 + 3
    assert layout.u_slice(0) == slice(0, 1)
    assert layout.u_slice(3) == slice(3, 4)
    assert layout.x_slice(1) == slice(4, 6)
    assert layout.x_slice(4) == slice(10, 12)
    assert layout.eps_index(1) == 12
    assert layout.eps_index(3) == 14
    with pytest.raises(IndexError):
        layout.u_slice(4)
    with pytest.raises(IndexError):
        layout.x_slice(0)
    with pytest.raises(IndexError):
        layout.eps_index(4)


def test_pack_unpack_roundtrip_is_bitwise():
    design = benchmark_design()
    sc = design.scenario
    rng = np.random.default_rng(0)
    inputs = rng.uniform(-1.0, 1.0, size=(sc.N, sc.m))
    plan = make_plan(design, rng.normal(size=sc.n), inputs)
    layout = PlanLayout(sc.N, sc.n, sc.m, 1)
    assert np.array_equal(layout.unpack(layout.pack(design, plan)), inputs)


# ---------------------------------------------------------------------------
# problem construction


def test_row_counts_ellipsoid():
    design = benchmark_design("ellipsoid")
    problem, layout = build_mpc_problem(design, np.zeros(2), None)
    # 6 inputs + 12 states + 5 slacks
    assert layout.n_z == 23
    assert problem.constraints.m_eq == 12
    # per step 2m+2p = 4 over 6 steps, 1 terminal, 5 domination, 5 sign
    assert problem.constraints.m == 24 + 1 + 5 + 5

    problem, _ = build_mpc_problem(design, np.zeros(2), 500.0)
    assert problem.constraints.m == 24 + 1 + 5 + 5 + 1


def test_row_counts_polyhedron():
    design = benchmark_design("polyhedron")
    assert design.terminal_set.facets == 6
    problem, layout = build_mpc_problem(design, np.zeros(2), 500.0)
    assert layout.n_z == 23
    assert problem.constraints.m_eq == 12
    # terminal and domination rows split per facet
    assert problem.constraints.m == 24 + 6 + 6 * 5 + 5 + 1


def test_negative_slack_budget_raises():
    design = benchmark_design()
    # the origin is far outside the terminal set, so f(x)+ exceeds 1
    with pytest.raises(ValueError, match="negative slack budget"):
        build_mpc_problem(design, np.zeros(2), 1.0)


@pytest.mark.parametrize("kind", ["ellipsoid", "polyhedron"])
def test_feedback_plan_feasible_inside_terminal(kind):
    design = benchmark_design(kind)
    problem, layout = build_mpc_problem(design, design.x_r, 0.0)
    plan = feedback_rollout(design, design.x_r)
    assert problem.constraints.max_violation(layout.pack(design, plan)) <= 1e-9


def test_rows_match_trajectory_oracle():
    rng = np.random.default_rng(21)
    for trial in range(24):
        kind = "polyhedron" if trial % 2 == 0 else "ellipsoid"
        design = random_tracking_design(rng, kind)
        sc = design.scenario
        x_now = design.x_r + rng.uniform(-0.5, 0.5, size=sc.n)
        inputs = rng.uniform(-1.0, 1.0, size=(sc.N, sc.m))
        plan = make_plan(design, x_now, inputs)
        eps = rng.uniform(0.0, 2.0, size=sc.N - 1)
        phi_prev = None
        if trial % 3 != 0:
            phi_prev = max(design.terminal_value(x_now), 0.0) + float(
                rng.uniform(0.0, 2.0)
            )
        problem, layout = build_mpc_problem(design, x_now, phi_prev)
        z = layout.pack(design, plan)
        for k in range(1, sc.N):
            z[layout.eps_index(k)] = eps[k - 1]
        f_vals, eq_res = problem.constraints.residuals(z)
        want = constraint_values_oracle(design, x_now, plan, eps, phi_prev)
        assert f_vals.shape == want.shape
        assert np.max(np.abs(f_vals - want)) <= 1e-12
        # model-consistent states satisfy the dynamics rows exactly
        assert np.max(np.abs(eq_res)) <= 1e-12


def test_objective_matches_plan_cost():
    rng = np.random.default_rng(5)
    for trial in range(12):
        kind = "polyhedron" if trial % 2 == 0 else "ellipsoid"
        design = random_tracking_design(rng, kind)
        sc = design.scenario
        x_now = design.x_r + rng.uniform(-0.5, 0.5, size=sc.n)
        plan = make_plan(
            design, x_now, rng.uniform(-1.0, 1.0, size=(sc.N, sc.m))
        )
        problem, layout = build_mpc_problem(design, x_now, None)
        z = layout.pack(design, plan)
        got = problem.objective.value(z)
        assert abs(got - plan.cost) <= 1e-9 * (1.0 + abs(plan.cost))


# ---------------------------------------------------------------------------
# accounting value


def test_compute_phi_zero_when_all_states_inside():
    design = benchmark_design("polyhedron")
    plan = feedback_rollout(design, design.x_r)
    assert compute_phi(design, plan) == 0.0


def test_compute_phi_counts_single_interior_excess():
    design = benchmark_design("polyhedron")
    sc = design.scenario
    states = np.tile(design.x_r, (sc.N + 1, 1))
    # one interior state pushed 0.3 beyond the first facet; endpoints are
    # pushed far outside and must not be counted
    states[2, 0] += design.terminal_set.k[0] + 0.3
    states[0] += 50.0
    states[sc.N] += 50.0
    plan = Plan(np.zeros((sc.N, sc.m)), states, 0.0)
    assert compute_phi(design, plan) == pytest.approx(0.3, abs=1e-12)


def test_compute_phi_matches_direct_sum():
    rng = np.random.default_rng(13)
    for trial in range(12):
        kind = "polyhedron" if trial % 2 == 0 else "ellipsoid"
        design = random_tracking_design(rng, kind)
        sc = design.scenario
        plan = make_plan(
            design,
            design.x_r + rng.uniform(-1.0, 1.0, size=sc.n),
            rng.uniform(-1.0, 1.0, size=(sc.N, sc.m)),
        )
        direct = sum(
            max(design.terminal_value(plan.states[k]), 0.0)
            for k in reversed(range(1, sc.N))
        )
        assert abs(compute_phi(design, plan) - direct) <= 1e-12


# ---------------------------------------------------------------------------
# plan shifting


def test_shift_plan_at_equilibrium():
    design = benchmark_design()
    sc = design.scenario
    prev = make_plan(design, design.x_r, np.tile(design.u_r, (sc.N, 1)))
    shifted = shift_plan(design, prev)
    assert np.array_equal(shifted.inputs[:-1], prev.inputs[1:])
    assert np.allclose(shifted.inputs[-1], design.u_r, atol=1e-12)
    assert np.allclose(shifted.states[-1], design.x_r, atol=1e-10)


def test_shift_plan_preserves_terminal_membership():
    design = benchmark_design("polyhedron")
    x0 = design.x_r + np.array([0.05, -0.03])
    assert design.terminal_value(x0) <= 0.0
    prev = feedback_rollout(design, x0)
    assert compute_phi(design, prev) == 0.0
    shifted = shift_plan(design, prev)
    assert compute_phi(design, shifted) == 0.0
    assert design.terminal_value(shifted.states[-1]) <= 0.0


def test_shift_identity_from_optimized_plan():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    ctrl.step(np.zeros(2))
    prev = ctrl.plan
    phi_prev = ctrl.phi
    assert phi_prev > 1.0  # the origin starts far outside the terminal set
    shifted = shift_plan(design, prev)
    realized = max(design.terminal_value(prev.states[1]), 0.0)
    dust = max(design.terminal_value(prev.states[-1]), 0.0)
    got = compute_phi(design, shifted)
    assert abs(got - (phi_prev - realized + dust)) <= 1e-9
    assert dust <= 1e-9
    # the shifted plan is feasible for the next step's problem
    problem, layout = build_mpc_problem(design, prev.states[1], phi_prev)
    z = layout.pack(design, shifted)
    assert problem.constraints.max_violation(z) <= 1e-8
    assert plan_violation(design, shifted) <= 1e-6


# ---------------------------------------------------------------------------
# controller steps


def test_initial_step_establishes_feasible_plan():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    u, diag = ctrl.step(np.zeros(2))
    sc = design.scenario
    assert np.all(u >= sc.u_min - 1e-9) and np.all(u <= sc.u_max + 1e-9)
    assert diag.t == 0
    assert diag.solver_status == "converged"
    assert not diag.fallback_used
    assert diag.phi == compute_phi(design, ctrl.plan)
    assert plan_violation(design, ctrl.plan) <= 1e-6
    assert design.terminal_value(ctrl.plan.states[-1]) <= 1e-9
    assert diag.cost == ctrl.plan.cost


def test_budget_zero_step_is_bitwise_fallback():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    ctrl.step(np.zeros(2), max_inner_iterations=5)
    prev = ctrl.plan
    expected = shift_plan(design, prev)
    u, diag = ctrl.step(prev.states[1], max_inner_iterations=0)
    assert np.array_equal(u, expected.inputs[0])
    assert np.array_equal(ctrl.plan.inputs, expected.inputs)
    assert diag.fallback_used
    assert diag.solver_status == "skipped"
    assert diag.inner_iterations == 0


def test_unbounded_step_never_worse_than_fallback():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    ctrl.step(np.zeros(2))
    prev = ctrl.plan
    fallback = shift_plan(design, prev)
    _, diag = ctrl.step(prev.states[1])
    assert diag.cost <= fallback.cost + 1e-9 * (1.0 + abs(fallback.cost))


def test_closed_loop_invariants_under_small_budget():
    design = benchmark_design()
    sc = design.scenario
    ctrl = AnytimeController(design)
    x = np.zeros(2)
    prev_phi = None
    for t in range(12):
        u, diag = ctrl.step(x, max_inner_iterations=20)
        assert np.all(u >= sc.u_min - 1e-6) and np.all(u <= sc.u_max + 1e-6)
        if prev_phi is not None:
            assert diag.phi <= prev_phi - diag.f_plus + 1e-8
        prev_phi = diag.phi
        x = step_state(sc.A, sc.B, x, u)
        y = sc.C @ x
        assert np.all(y >= sc.y_min - 1e-6) and np.all(y <= sc.y_max + 1e-6)


def test_state_mismatch_raises():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    ctrl.step(np.zeros(2), max_inner_iterations=5)
    bad = ctrl.plan.states[1] + 0.5
    with pytest.raises(ValueError, match="away from the prediction"):
        ctrl.step(bad)


def test_initialization_failure_reported():
    design = benchmark_design()
    ctrl = AnytimeController(design)
    # from this state the first predicted output violates its bound for
    # every admissible input, so no feasible plan exists
    with pytest.raises(InitializationError):
        ctrl.step(np.array([50.0, 50.0]))


# ---------------------------------------------------------------------------
# plan containers


def test_make_plan_states_follow_model_bitwise():
    design = benchmark_design()
    sc = design.scenario
    rng = np.random.default_rng(2)
    inputs = rng.uniform(-1.0, 1.0, size=(sc.N, sc.m))
    x0 = rng.normal(size=sc.n)
    plan = make_plan(design, x0, inputs)
    x = x0
    for k in range(sc.N):
        x = step_state(sc.A, sc.B, x, inputs[k])
        assert np.array_equal(plan.states[k + 1], x)
    assert plan.cost == open_loop_cost(design, plan.states, plan.inputs)


def test_plan_violation_flags_bound_breach():
    design = benchmark_design()
    sc = design.scenario
    inside = feedback_rollout(design, design.x_r)
    assert plan_violation(design, inside) <= 1e-12
    hot = make_plan(design, design.x_r, np.full((sc.N, sc.m), 3.0))
    assert plan_violation(design, hot) >= 2.0 - 1e-12


def test_packaged_example_data_consistency():
    scenario = load_example_scenario()
    assert (scenario.n, scenario.m, scenario.p, scenario.N) == (2, 1, 1, 6)
    ellipsoid = load_example_terminal_set()
    assert np.allclose(
        ellipsoid.P, [[105.4493, 23.9713], [23.9713, 105.4493]]
    )
    polyhedron = load_example_terminal_polyhedron()
    assert polyhedron.facets == 6
    assert np.allclose(np.sort(polyhedron.k), np.sort(np.array(
        [0.1, 0.1, 0.1, 0.1, 0.09145041, 0.09145041]
    )), atol=1e-8)
