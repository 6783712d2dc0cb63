"""Scenario data and its reference-specific resolution.

:class:`MpcScenario` carries everything that is independent of the
commanded reference: model matrices, input/output bounds, horizon, cost
weights, the reference polytope's vertices, and the target-set rows.
:func:`design_for_reference` resolves a scenario against a concrete
reference and terminal set into an :class:`MpcDesign`, the object the
controller consumes: steady-state target, terminal cost, fallback gain,
and centered terminal membership functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .terminal import (
    EllipsoidSet,
    PolyhedralSet,
    admissible_offsets,
    admissible_offsets_min,
    admissible_rows,
    dare_lqr,
    ellipsoid_level,
    max_admissible_polyhedron,
    steady_state_target,
)

__all__ = [
    "MpcScenario",
    "MpcDesign",
    "design_for_reference",
    "polyhedral_terminal_set",
    "scenario_to_dict",
    "scenario_from_dict",
    "load_scenario",
    "save_scenario",
    "load_example_scenario",
    "load_example_terminal_set",
    "load_example_terminal_polyhedron",
]


def _matrix(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return M


def _vector(v, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    return v


class MpcScenario:
    """Reference-independent problem data for a linear tracking MPC.

    Parameters
    ----------
    A, B, C : array_like
        Discrete model ``x+ = Ax + Bu``, ``y = Cx``.
    u_min, u_max, y_min, y_max : array_like
        Box bounds with ``u_min < 0 < u_max`` and ``y_min < 0 < y_max``.
    N : int
        Prediction horizon, at least 2.
    Q_stage, R_stage : array_like
        Stage weights on state and input deviations; PSD and PD.
    reference_vertices : array_like, shape (n_R, p)
        Vertices of the polytope of admissible references.
    S, s : array_like
        Target-set rows: the tracking goal is ``S (x - x_r) <= s``.
    """

    def __init__(self, A, B, C, u_min, u_max, y_min, y_max, N,
                 Q_stage, R_stage, reference_vertices, S, s):
        self.A = _matrix(A, "A")
        self.B = _matrix(B, "B")
        self.C = _matrix(C, "C")
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("B and C must match the state dimension")
        m, p = self.B.shape[1], self.C.shape[0]
        self.u_min = _vector(u_min, "u_min")
        self.u_max = _vector(u_max, "u_max")
        self.y_min = _vector(y_min, "y_min")
        self.y_max = _vector(y_max, "y_max")
        if self.u_min.shape != (m,) or self.u_max.shape != (m,):
            raise ValueError("input bounds must have the input dimension")
        if self.y_min.shape != (p,) or self.y_max.shape != (p,):
            raise ValueError("output bounds must have the output dimension")
        if not (np.all(self.u_min < 0) and np.all(self.u_max > 0)):
            raise ValueError("input bounds must straddle zero")
        if not (np.all(self.y_min < 0) and np.all(self.y_max > 0)):
            raise ValueError("output bounds must straddle zero")
        self.N = int(N)
        if self.N < 2:
            raise ValueError("horizon must be at least 2")
        self.Q_stage = _matrix(Q_stage, "Q_stage")
        self.R_stage = np.atleast_2d(np.asarray(R_stage, dtype=float))
        if self.Q_stage.shape != (n, n):
            raise ValueError("Q_stage must be n x n")
        if self.R_stage.shape != (m, m):
            raise ValueError("R_stage must be m x m")
        if np.linalg.eigvalsh(0.5 * (self.Q_stage + self.Q_stage.T)).min() < -1e-9:
            raise ValueError("Q_stage must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R_stage + self.R_stage.T)).min() <= 0:
            raise ValueError("R_stage must be positive definite")
        self.reference_vertices = np.atleast_2d(
            np.asarray(reference_vertices, dtype=float)
        )
        if self.reference_vertices.shape[1] != p:
            raise ValueError("reference vertices must have the output dimension")
        if self.reference_vertices.shape[0] == 0:
            raise ValueError("reference polytope needs at least one vertex")
        self.S = _matrix(S, "S")
        self.s = _vector(s, "s")
        if self.S.shape[1] != n or self.S.shape[0] != self.s.shape[0]:
            raise ValueError("target-set rows are dimensionally inconsistent")
        if np.any(self.s <= 0):
            raise ValueError("target-set offsets must be strictly positive")
        self._riccati = None

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    def riccati(self):
        """Terminal cost matrix and LQR gain for the stage weights, cached."""
        if self._riccati is None:
            self._riccati = dare_lqr(self.A, self.B, self.Q_stage, self.R_stage)
        return self._riccati

    def steady_state(self, r):
        return steady_state_target(self.A, self.B, self.C, r)

    def __repr__(self):
        return (
            f"MpcScenario(n={self.n}, m={self.m}, p={self.p}, N={self.N})"
        )


@dataclass
class MpcDesign:
    """A scenario resolved against one reference and terminal set.

    ``K_term`` is the gain that extends a plan by one step at the end of
    the horizon: the published gain of an ellipsoidal set, or the LQR
    gain that generated a polyhedral one.
    """

    scenario: MpcScenario
    terminal_set: object
    r: np.ndarray
    x_r: np.ndarray
    u_r: np.ndarray
    P_cost: np.ndarray
    K_term: np.ndarray

    def terminal_functions(self):
        """Membership functions of the terminal set centered at the target."""
        if not hasattr(self, "_terminal_fns"):
            self._terminal_fns = self.terminal_set.membership_functions(
                self.x_r
            )
        return self._terminal_fns

    def terminal_value(self, x):
        """Terminal membership value at ``x``; <= 0 inside the set.

        Evaluated through the same membership functions that become
        constraint rows, so slack accounting built on this value agrees
        with those rows to the last bit, not merely to rounding error.
        """
        return max(fn.value(x) for fn in self.terminal_functions())


def design_for_reference(scenario, terminal_set, r, recompute_level=True):
    """Resolve ``scenario`` for reference ``r`` with the given terminal set.

    For an ellipsoidal set the admissible level depends on the
    reference, so by default it is recomputed here for ``r``; pass
    ``recompute_level=False`` to keep the stored level (which must then
    itself be admissible for ``r``).  Polyhedral sets built from the
    vertex-minimum offsets are valid for every reference as-is.
    """
    r = _vector(r, "r")
    x_r, u_r = scenario.steady_state(r)
    P_cost, K_lqr = scenario.riccati()
    if isinstance(terminal_set, EllipsoidSet):
        K_term = terminal_set.K
        if recompute_level:
            rows = admissible_rows(
                scenario.A, scenario.B, scenario.C, K_term, scenario.S
            )
            offs = admissible_offsets(
                scenario.u_min, scenario.u_max, scenario.y_min,
                scenario.y_max, scenario.s, u_r, r,
            )
            terminal_set = terminal_set.with_level(
                ellipsoid_level(terminal_set.P, rows, offs)
            )
    elif isinstance(terminal_set, PolyhedralSet):
        K_term = K_lqr
    else:
        raise TypeError(
            f"unsupported terminal set type: {type(terminal_set).__name__}"
        )
    return MpcDesign(
        scenario=scenario,
        terminal_set=terminal_set,
        r=r,
        x_r=x_r,
        u_r=u_r,
        P_cost=P_cost,
        K_term=K_term,
    )


def polyhedral_terminal_set(scenario, contraction=1.0):
    """Maximal invariant polyhedron for the scenario's LQR closed loop.

    Builds the constraint rows seen by the LQR feedback, takes
    vertex-minimum offsets over the reference polytope so the set works
    for every admissible reference, and runs the fixed-point iteration.
    """
    _, K_lqr = scenario.riccati()
    rows = admissible_rows(scenario.A, scenario.B, scenario.C, K_lqr, scenario.S)
    offs = admissible_offsets_min(
        scenario.A, scenario.B, scenario.C, scenario.u_min, scenario.u_max,
        scenario.y_min, scenario.y_max, scenario.s, scenario.reference_vertices,
    )
    return max_admissible_polyhedron(
        scenario.A + scenario.B @ K_lqr, rows, offs, contraction=contraction
    )


def scenario_to_dict(scenario):
    return {
        "A": scenario.A.tolist(),
        "B": scenario.B.tolist(),
        "C": scenario.C.tolist(),
        "u_min": scenario.u_min.tolist(),
        "u_max": scenario.u_max.tolist(),
        "y_min": scenario.y_min.tolist(),
        "y_max": scenario.y_max.tolist(),
        "N": scenario.N,
        "Q": scenario.Q_stage.tolist(),
        "R": scenario.R_stage.tolist(),
        "reference_vertices": scenario.reference_vertices.tolist(),
        "target_set": {"S": scenario.S.tolist(), "s": scenario.s.tolist()},
    }


def scenario_from_dict(d):
    try:
        target = d["target_set"]
        return MpcScenario(
            A=d["A"], B=d["B"], C=d["C"],
            u_min=d["u_min"], u_max=d["u_max"],
            y_min=d["y_min"], y_max=d["y_max"],
            N=d["N"], Q_stage=d["Q"], R_stage=d["R"],
            reference_vertices=d["reference_vertices"],
            S=target["S"], s=target["s"],
        )
    except KeyError as exc:
        raise ValueError(f"scenario is missing field {exc.args[0]!r}") from exc


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(scenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")


def _read_data(name):
    return json.loads(
        resources.files("anytime_mpc").joinpath("data").joinpath(name).read_text()
    )


def load_example_scenario():
    """The benchmark scenario shipped with the package."""
    return scenario_from_dict(_read_data("example_scenario.json"))


def load_example_terminal_set():
    """The published ellipsoidal terminal pair for the example scenario."""
    from .terminal import terminal_set_from_dict

    return terminal_set_from_dict(_read_data("example_terminal_ellipsoid.json"))


def load_example_terminal_polyhedron():
    """The maximal admissible polyhedron for the example scenario."""
    from .terminal import terminal_set_from_dict

    return terminal_set_from_dict(_read_data("example_terminal_polyhedron.json"))
