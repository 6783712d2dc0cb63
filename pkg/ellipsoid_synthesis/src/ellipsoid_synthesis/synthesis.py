"""Determinant-maximization synthesis of an invariant ellipsoid and gain.

Given a linear plant with input/output bounds, a polytope of candidate
references, and a target set, this module solves a semidefinite program
in variables (Q, Y, X) whose optimum certifies that the ellipsoid
``{x : (x - x_r)' Q^{-1} (x - x_r) <= 1}`` is constrained controlled
invariant under the feedback ``u = u_r + Y Q^{-1} (x - x_r)`` for every
admissible reference.  Maximizing ``log det Q`` picks the largest such
ellipsoid.  The result is emitted in the terminal-set JSON format the
companion controller package consumes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

_EIG_TOL = 1e-7
_SOLVERS = ("CLARABEL", "SCS")


class SynthesisError(RuntimeError):
    """Synthesis failed; ``family`` names the offending constraint group."""

    def __init__(self, message, family=None):
        super().__init__(message)
        self.family = family


def _matrix(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {M.shape}")
    return M


def _vector(v, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    return v


@dataclass(frozen=True)
class SynthesisInput:
    """Plant, bounds, reference polytope, target set, contraction factor.

    ``lam`` in [0, 1] bounds the one-step growth of the invariant
    ellipsoid's quadratic form: 1 asks only for invariance, smaller
    values for geometric contraction.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    S: np.ndarray
    s: np.ndarray
    reference_vertices: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", _matrix(self.A, "A"))
        object.__setattr__(self, "B", _matrix(self.B, "B"))
        object.__setattr__(self, "C", _matrix(self.C, "C"))
        for name in ("u_min", "u_max", "y_min", "y_max", "s"):
            object.__setattr__(self, name, _vector(getattr(self, name), name))
        object.__setattr__(self, "S", _matrix(self.S, "S"))
        object.__setattr__(
            self, "reference_vertices",
            np.atleast_2d(np.asarray(self.reference_vertices, dtype=float)),
        )
        n, m = self.B.shape
        p = self.C.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A and B disagree on the state dimension")
        if self.C.shape[1] != n:
            raise ValueError("C has the wrong number of columns")
        if self.S.shape[1] != n or self.S.shape[0] != self.s.shape[0]:
            raise ValueError("target set rows and offsets disagree")
        if self.reference_vertices.shape[1] != p:
            raise ValueError("reference vertices must have one output per column")
        if not 0.0 <= float(self.lam) <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n(self):
        return self.B.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


def input_from_scenario_dict(d, lam=1.0):
    """Build a :class:`SynthesisInput` from the scenario JSON layout."""
    try:
        target = d["target_set"]
        return SynthesisInput(
            A=d["A"], B=d["B"], C=d["C"],
            u_min=d["u_min"], u_max=d["u_max"],
            y_min=d["y_min"], y_max=d["y_max"],
            S=target["S"], s=target["s"],
            reference_vertices=d["reference_vertices"],
            lam=lam,
        )
    except KeyError as exc:
        raise ValueError(f"scenario is missing field {exc.args[0]!r}") from exc


def load_input(path, lam=1.0):
    with open(path, "r", encoding="utf-8") as fh:
        return input_from_scenario_dict(json.load(fh), lam=lam)


def steady_state_inputs(inp):
    """Steady-state input for each reference vertex.

    Solves the equilibrium conditions ``x = A x + B u``, ``C x = r``;
    the plant must determine the pair uniquely (square, invertible
    steady-state map), which is checked by the residual.
    """
    n, m, p = inp.n, inp.m, inp.p
    M = np.block([[inp.A - np.eye(n), inp.B], [inp.C, np.zeros((p, m))]])
    out = []
    for r in inp.reference_vertices:
        rhs = np.concatenate([np.zeros(n), r])
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        if np.linalg.norm(M @ sol - rhs) > 1e-8 * (1.0 + np.linalg.norm(rhs)):
            raise SynthesisError(
                f"no steady state tracks reference {r}", family="references"
            )
        out.append(sol[n:])
    return np.array(out)


def bound_headroom(inp):
    """Worst-case slack to the input/output bounds over the references.

    Returns ``(u_bar, y_bar)``: for every channel, the smallest distance
    from any vertex steady state to its box bounds.  Both must be
    strictly positive or no ellipsoid can serve every reference.
    """
    u_bar = np.full(inp.m, np.inf)
    y_bar = np.full(inp.p, np.inf)
    for u_r, r in zip(steady_state_inputs(inp), inp.reference_vertices):
        u_bar = np.minimum(u_bar, np.minimum(inp.u_max - u_r, u_r - inp.u_min))
        y_bar = np.minimum(y_bar, np.minimum(inp.y_max - r, r - inp.y_min))
    if np.any(u_bar <= 0.0) or np.any(y_bar <= 0.0):
        raise SynthesisError(
            "reference polytope leaves no bound headroom: "
            f"u_bar={u_bar}, y_bar={y_bar}", family="headroom",
        )
    return u_bar, y_bar


def _bmat(rows):
    if any(isinstance(e, cp.Expression) for row in rows for e in row):
        return cp.bmat(rows)
    return np.block(rows)


def lmi_blocks(inp, Q, Y):
    """Named PSD blocks of the synthesis program at the point ``(Q, Y)``.

    Works for both cvxpy variables (to state constraints) and plain
    arrays (to audit a solution independently of the solver).
    """
    _, y_bar = bound_headroom(inp)
    closed = inp.A @ Q + inp.B @ Y
    blocks = [
        ("contraction", _bmat([[Q, closed.T], [closed, inp.lam * Q]])),
    ]
    for i in range(inp.p):
        Ci = inp.C[i:i + 1]
        blocks.append((
            f"output_{i}",
            _bmat([[Q, closed.T @ Ci.T],
                   [Ci @ closed, np.array([[y_bar[i] ** 2]])]]),
        ))
    for i in range(inp.S.shape[0]):
        Si = inp.S[i:i + 1]
        blocks.append((
            f"target_{i}",
            _bmat([[Q, Q @ Si.T], [Si @ Q, np.array([[inp.s[i] ** 2]])]]),
        ))
    return blocks


def _input_energy_block(Q, Y, X):
    return _bmat([[X, Y], [Y.T, Q]])


def audit_blocks(inp, Q, Y, X):
    """Minimum eigenvalue of every PSD block and input-cap slack.

    Pure numpy substitution: an independent check that the returned
    matrices actually satisfy the program, whatever the solver claimed.
    """
    u_bar, _ = bound_headroom(inp)
    report = {
        name: float(np.linalg.eigvalsh(block).min())
        for name, block in lmi_blocks(inp, Q, Y)
    }
    report["input_energy"] = float(
        np.linalg.eigvalsh(_input_energy_block(Q, Y, X)).min()
    )
    report["input_caps"] = float(np.min(u_bar ** 2 - np.diag(X)))
    return report


@dataclass(frozen=True)
class SynthesisResult:
    """Certified ellipsoid matrix, gain, raw SDP variables, and audit."""

    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    lam: float
    det_root: float
    report: dict = field(default_factory=dict)

    def terminal_set_dict(self):
        """Terminal-set JSON payload; level 1 is the certified level."""
        return {
            "type": "ellipsoid",
            "P": self.P.tolist(),
            "rho": 1.0,
            "K": self.K.tolist(),
            "metadata": {"lambda": self.lam},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.terminal_set_dict(), fh, indent=2)
            fh.write("\n")


# P = Q^{-1} amplifies block residuals by the conditioning of Q, so the
# solver is run well below the 1e-7 audit tolerance.
_SOLVER_SETTINGS = {
    "CLARABEL": dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11,
                     tol_ktratio=1e-9),
    "SCS": dict(eps=1e-9, max_iters=200000),
}


def _solve_program(objective, constraints):
    problem = cp.Problem(objective, constraints)
    last = None
    for solver in _SOLVERS:
        try:
            # The accuracy warning is moot: every solution is re-audited
            # by eigenvalue substitution before anything trusts it.
            with warnings.catch_warnings():
                warnings.filterwarnings(
                    "ignore", message="Solution may be inaccurate"
                )
                problem.solve(
                    solver=solver, **_SOLVER_SETTINGS.get(solver, {})
                )
        except cp.error.SolverError as exc:
            last = exc
            continue
        return problem
    raise SynthesisError(f"every SDP solver failed: {last}")


def _diagnose_infeasibility(inp, u_bar):
    """Find the first constraint family that kills feasibility.

    Re-solves pure feasibility problems with the families added one at
    a time (strict positive-definiteness of Q stands in for the
    determinant objective's implicit domain).
    """
    n, m = inp.n, inp.m
    Q = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    X = cp.Variable((m, m), symmetric=True)
    base = [Q >> 1e-6 * np.eye(n)]
    families = [("contraction", [dict(lmi_blocks(inp, Q, Y))["contraction"] >> 0])]
    families.append(("input_energy", [_input_energy_block(Q, Y, X) >> 0]))
    families.append((
        "input_caps", [X[i, i] <= u_bar[i] ** 2 for i in range(m)]
    ))
    named = dict(lmi_blocks(inp, Q, Y))
    families.append((
        "outputs", [named[f"output_{i}"] >> 0 for i in range(inp.p)]
    ))
    families.append((
        "target", [named[f"target_{i}"] >> 0 for i in range(inp.S.shape[0])]
    ))
    cons = list(base)
    for name, group in families:
        cons.extend(group)
        probe = _solve_program(cp.Minimize(0), cons)
        if probe.status not in ("optimal", "optimal_inaccurate"):
            return name
    return "unknown"


def synthesize_ellipsoid(inp):
    """Solve the synthesis program and return the certified result.

    Raises :class:`SynthesisError` when the program is infeasible (the
    contraction factor too small or the bounds too tight), naming the
    constraint family that makes it so.
    """
    u_bar, _ = bound_headroom(inp)
    n, m = inp.n, inp.m
    Q = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    X = cp.Variable((m, m), symmetric=True)
    constraints = [block >> 0 for _, block in lmi_blocks(inp, Q, Y)]
    constraints.append(_input_energy_block(Q, Y, X) >> 0)
    constraints += [X[i, i] <= u_bar[i] ** 2 for i in range(m)]
    problem = _solve_program(cp.Maximize(cp.log_det(Q)), constraints)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        family = _diagnose_infeasibility(inp, u_bar)
        raise SynthesisError(
            f"synthesis program is {problem.status}; first failing "
            f"constraint family: {family}", family=family,
        )
    Q_v = np.asarray(Q.value)
    Q_v = 0.5 * (Q_v + Q_v.T)
    P = np.linalg.inv(Q_v)
    P = 0.5 * (P + P.T)
    K = np.asarray(Y.value) @ np.linalg.inv(Q_v)
    X_v = 0.5 * (np.asarray(X.value) + np.asarray(X.value).T)
    report = audit_blocks(inp, Q_v, np.asarray(Y.value), X_v)
    worst = min(report.values())
    if worst < -_EIG_TOL:
        bad = min(report, key=report.get)
        raise SynthesisError(
            f"solver returned a point violating {bad} "
            f"(min eigenvalue {report[bad]:.2e})", family=bad,
        )
    return SynthesisResult(
        P=P, K=K, Q=Q_v, Y=np.asarray(Y.value), X=X_v, lam=inp.lam,
        det_root=float(np.linalg.det(Q_v)) ** (1.0 / n),
        report=report,
    )
