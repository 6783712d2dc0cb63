"""Terminal ingredients for set-tracking MPC.

Everything the controller needs around a commanded reference: the
steady-state target, the Riccati terminal cost and gain, the constraint
rows a local feedback law must respect in deviation coordinates, the
largest admissible level of a given ellipsoid shape, and the maximal
admissible polyhedral invariant set of a stable closed loop.

Set descriptions are reference-free: an :class:`EllipsoidSet` or
:class:`PolyhedralSet` stores shape data only and is bound to a center
when membership functions are requested, so one description serves every
trackable reference.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .convex import ConvexFunction, FeasibilityProblem, OptimizationProblem
from .optimize import OptOptions, UnboundedProblemError, solve

__all__ = [
    "steady_state_target",
    "dare_lqr",
    "spectral_radius",
    "admissible_rows",
    "admissible_offsets",
    "admissible_offsets_min",
    "ellipsoid_level",
    "EllipsoidSet",
    "PolyhedralSet",
    "max_admissible_polyhedron",
    "terminal_set_to_dict",
    "terminal_set_from_dict",
    "load_terminal_set",
    "save_terminal_set",
]

_STEADY_STATE_TOL = 1e-9
# Rows whose support direction the ellipsoid shape cannot reach at all;
# they put no ceiling on the level and are skipped.
_FLAT_ROW_TOL = 1e-14
_REDUNDANCY_TOL = 1e-9
_DUPLICATE_TOL = 1e-9
_ZERO_ROW_TOL = 1e-12


def _matrix(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim {M.ndim}")
    return M


def _vector(v, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"{name} must be a vector, got ndim {v.ndim}")
    return v


def spectral_radius(M):
    """Largest eigenvalue magnitude of a square matrix."""
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(M, dtype=float)))))


def steady_state_target(A, B, C, r):
    """Steady state and input holding the output at ``r``.

    Solves the square linear system ``A x_r + B u_r = x_r``,
    ``C x_r = r`` exactly and verifies the residuals.

    Parameters
    ----------
    A, B, C : array_like
        Discrete-time model matrices, shapes (n, n), (n, m), (p, n).
    r : array_like
        Output reference, shape (p,); a scalar is accepted when p = 1.

    Returns
    -------
    (x_r, u_r) : pair of arrays

    Raises
    ------
    ValueError
        If p != m (the stacked system is not square) or the system is
        singular, i.e. the reference is not trackable.
    """
    A = _matrix(A, "A")
    B = _matrix(B, "B")
    C = _matrix(C, "C")
    r = _vector(r, "r")
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    if C.shape != (p, n) or B.shape != (n, m) or A.shape != (n, n):
        raise ValueError("inconsistent model dimensions")
    if r.shape != (p,):
        raise ValueError(f"r has shape {r.shape}, expected ({p},)")
    if p != m:
        raise ValueError(
            f"steady-state system is not square (p={p}, m={m}); "
            "cannot assign the output reference uniquely"
        )
    M = np.block([[A - np.eye(n), B], [C, np.zeros((p, m))]])
    rhs = np.concatenate([np.zeros(n), r])
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"reference is not trackable: {exc}") from exc
    x_r, u_r = sol[:n], sol[n:]
    res_state = np.linalg.norm((A - np.eye(n)) @ x_r + B @ u_r)
    res_out = np.linalg.norm(C @ x_r - r)
    if res_state > _STEADY_STATE_TOL or res_out > _STEADY_STATE_TOL:
        raise ValueError(
            "steady-state solve residual too large "
            f"({res_state:.3e}, {res_out:.3e}); system is near-singular"
        )
    return x_r, u_r


def dare_lqr(A, B, Q, R, tol=1e-12, max_iterations=200000):
    """Discrete-time LQR cost matrix and gain by Riccati fixed point.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`` from ``P = Q``
    until the relative change drops below ``tol``.

    Returns
    -------
    (P, K) : pair of arrays
        ``P`` solves the Riccati equation to a 1e-10 residual and
        ``K = -(R + B'PB)^-1 B'PA`` makes ``A + BK`` a strict
        contraction in spectral radius.

    Raises
    ------
    ValueError
        On non-convergence or an unstable closed loop, both signs of a
        non-stabilizable pair.
    """
    A = _matrix(A, "A")
    B = _matrix(B, "B")
    Q = _matrix(Q, "Q")
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iterations):
        gain_core = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ (P @ A) - (A.T @ P @ B) @ gain_core
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise ValueError("Riccati iteration diverged; (A, B) not stabilizable?")
        if np.linalg.norm(P_next - P) <= tol * max(1.0, np.linalg.norm(P_next)):
            P = P_next
            break
        P = P_next
    else:
        raise ValueError("Riccati iteration did not converge")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    residual = Q + A.T @ P @ A - (A.T @ P @ B) @ (-K) - P
    if np.linalg.norm(residual) > 1e-10 * max(1.0, np.linalg.norm(P)):
        raise ValueError("Riccati residual check failed")
    if spectral_radius(A + B @ K) >= 1.0:
        raise ValueError("closed loop is not a contraction; (A, B) not stabilizable?")
    return P, K


def admissible_rows(A, B, C, K, S):
    """Constraint rows on the deviation from target under ``u = K dx + u_r``.

    Stacks, in order: input upper bounds through the gain, input lower
    bounds, next-output upper bounds through the closed loop, next-output
    lower bounds, then the target-set rows ``S``.
    """
    A = _matrix(A, "A")
    B = _matrix(B, "B")
    C = _matrix(C, "C")
    K = _matrix(K, "K")
    S = _matrix(S, "S")
    A_cl = A + B @ K
    return np.vstack([K, -K, C @ A_cl, -(C @ A_cl), S])


def admissible_offsets(u_min, u_max, y_min, y_max, s, u_r, r):
    """Offsets paired with :func:`admissible_rows` for one reference."""
    u_min = _vector(u_min, "u_min")
    u_max = _vector(u_max, "u_max")
    y_min = _vector(y_min, "y_min")
    y_max = _vector(y_max, "y_max")
    s = _vector(s, "s")
    u_r = _vector(u_r, "u_r")
    r = _vector(r, "r")
    return np.concatenate([u_max - u_r, -u_min + u_r, y_max - r, -y_min + r, s])


def admissible_offsets_min(A, B, C, u_min, u_max, y_min, y_max, s, vertices):
    """Offsets valid for every reference in a polytope.

    Takes entrywise minima of :func:`admissible_offsets` over the
    polytope's vertices, each paired with its own steady-state input.
    Shrinking the vertex set can only raise these offsets.
    """
    vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
    if vertices.shape[0] == 0:
        raise ValueError("vertex list is empty")
    stacked = []
    for r_j in vertices:
        _, u_rj = steady_state_target(A, B, C, r_j)
        stacked.append(
            admissible_offsets(u_min, u_max, y_min, y_max, s, u_rj, r_j)
        )
    return np.min(np.array(stacked), axis=0)


def ellipsoid_level(P, rows, offsets):
    """Largest ``rho`` with ``{dx : dx'P dx <= rho}`` inside every halfspace.

    The support of the level-``rho`` ellipsoid in direction ``a`` is
    ``sqrt(rho a'P^-1 a)``, so the binding level for row ``a'dx <= b`` is
    ``b^2 / (a'P^-1 a)`` and the answer is the row minimum.  Rows the
    shape cannot reach (``a'P^-1 a`` ~ 0) put no ceiling and are skipped.

    Raises
    ------
    ValueError
        If some offset is nonpositive: the center itself violates that
        constraint, so no admissible level exists.
    """
    P = _matrix(P, "P")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    offsets = _vector(offsets, "offsets")
    if rows.shape[0] != offsets.shape[0]:
        raise ValueError("rows and offsets disagree in length")
    if np.any(offsets <= 0):
        bad = int(np.argmin(offsets))
        raise ValueError(
            f"offset {bad} is {offsets[bad]:.3e} <= 0: the target violates "
            "that constraint"
        )
    Q = np.linalg.inv(P)
    level = math.inf
    for a, b in zip(rows, offsets):
        reach = float(a @ Q @ a)
        if reach <= _FLAT_ROW_TOL:
            continue
        level = min(level, b * b / reach)
    return level


class EllipsoidSet:
    """Ellipsoidal terminal region ``(x - center)'P(x - center) <= rho``.

    Stores the shape ``P``, the level ``rho`` and the local feedback gain
    ``K`` that certifies invariance; the center is supplied when
    membership functions are built, keeping the description valid for
    every reference.
    """

    kind = "ellipsoid"

    def __init__(self, P, rho, K):
        P = _matrix(P, "P")
        if P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if not np.allclose(P, P.T, rtol=0, atol=1e-9 * max(1.0, abs(P).max())):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(0.5 * (P + P.T)).min() <= 0:
            raise ValueError("P must be positive definite")
        rho = float(rho)
        if rho <= 0:
            raise ValueError("rho must be positive")
        K = _matrix(K, "K")
        if K.shape[1] != P.shape[0]:
            raise ValueError("K column count must match the state dimension")
        self.P = 0.5 * (P + P.T)
        self.rho = rho
        self.K = K

    @property
    def n(self):
        return self.P.shape[0]

    def with_level(self, rho):
        """Same shape and gain at a different level."""
        return EllipsoidSet(self.P, rho, self.K)

    def value(self, center, x):
        """Membership value at ``x``; <= 0 inside."""
        dx = np.asarray(x, dtype=float) - np.asarray(center, dtype=float)
        return float(dx @ self.P @ dx - self.rho)

    def membership_functions(self, center):
        """The single quadratic whose nonpositivity defines the set."""
        center = _vector(center, "center")
        # dx'P dx - rho in the 0.5 x'Qx + q'x + c convention uses Q = 2P.
        return (
            ConvexFunction.quadratic(
                2.0 * self.P,
                -2.0 * (self.P @ center),
                float(center @ self.P @ center) - self.rho,
            ),
        )


class PolyhedralSet:
    """Polyhedral region ``H (x - center) <= k`` around a movable center."""

    kind = "polyhedron"

    def __init__(self, H, k):
        H = _matrix(H, "H")
        k = _vector(k, "k")
        if H.shape[0] != k.shape[0]:
            raise ValueError("H and k disagree in row count")
        norms = np.linalg.norm(H, axis=1)
        if np.any(norms <= _ZERO_ROW_TOL):
            raise ValueError("H contains a zero row")
        if np.any(k <= 0):
            raise ValueError("k must be strictly positive (center inside)")
        self.H = H
        self.k = k

    @property
    def n(self):
        return self.H.shape[1]

    @property
    def facets(self):
        return self.H.shape[0]

    def value(self, center, x):
        """Membership value: the worst facet margin; <= 0 inside."""
        dx = np.asarray(x, dtype=float) - np.asarray(center, dtype=float)
        return float(np.max(self.H @ dx - self.k))

    def membership_functions(self, center):
        """One affine function per facet, all nonpositive inside."""
        center = _vector(center, "center")
        return tuple(
            ConvexFunction.affine(self.H[i], -float(self.H[i] @ center) - self.k[i])
            for i in range(self.facets)
        )


def _support(H, k, direction):
    """Maximum of ``direction'x`` over ``{x : Hx <= k}`` via the solver."""
    n = len(direction)
    constraints = FeasibilityProblem(
        n, [ConvexFunction.affine(row, -off) for row, off in zip(H, k)]
    )
    objective = ConvexFunction.affine(-np.asarray(direction, dtype=float))
    try:
        res = solve(
            OptimizationProblem(objective, constraints),
            OptOptions(gap_tol=1e-10),
        )
    except UnboundedProblemError:
        return math.inf
    return -res.objective_value


def max_admissible_polyhedron(A_closed, rows, offsets, contraction=1.0,
                              max_powers=500):
    """Maximal set the closed loop keeps inside given constraint rows.

    Accumulates the rows ``rows @ A_closed^j x <= offsets`` for
    ``j = 0, 1, ...`` until every next-power row is redundant, testing
    redundancy by maximizing the row over the set built so far.  The
    result is the largest set in which the autonomous system
    ``x+ = A_closed x`` satisfies ``rows x <= offsets`` forever; with
    ``contraction < 1`` the iteration runs on ``A_closed / contraction``,
    which yields the largest set mapped into a scaled copy of itself.

    Parameters
    ----------
    A_closed : (n, n) array
        Stable closed-loop matrix (spectral radius below contraction).
    rows, offsets : arrays
        Constraint rows and strictly positive offsets.
    contraction : float in (0, 1]
    max_powers : int
        Cap on matrix powers; exceeding it signals near-marginal
        stability.

    Returns
    -------
    PolyhedralSet
        With unit-norm facet rows, duplicates and redundant rows removed.
    """
    A_closed = _matrix(A_closed, "A_closed")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    offsets = _vector(offsets, "offsets")
    if rows.shape[0] != offsets.shape[0]:
        raise ValueError("rows and offsets disagree in length")
    if np.any(offsets <= 0):
        raise ValueError("offsets must be strictly positive")
    if not 0.0 < contraction <= 1.0:
        raise ValueError("contraction must lie in (0, 1]")
    A_iter = A_closed / contraction
    radius = spectral_radius(A_iter)
    if radius >= 1.0:
        raise ValueError(
            f"closed loop spectral radius {radius:.4f} is not below the "
            "contraction factor; the iteration would not terminate"
        )

    H: list[np.ndarray] = []
    k: list[float] = []

    def try_add(a, b):
        """Normalize and append unless zero, duplicate, or redundant."""
        nrm = float(np.linalg.norm(a))
        if nrm <= _ZERO_ROW_TOL:
            if b < 0:
                raise ValueError("zero row with negative offset: empty set")
            return False
        a = a / nrm
        b = b / nrm
        for a_old, b_old in zip(H, k):
            if (np.linalg.norm(a - a_old) <= _DUPLICATE_TOL
                    and abs(b - b_old) <= _DUPLICATE_TOL):
                return False
        if H and _support(H, k, a) <= b + _REDUNDANCY_TOL:
            return False
        H.append(a)
        k.append(b)
        return True

    for a, b in zip(rows, offsets):
        try_add(a.copy(), float(b))
    power = np.eye(A_closed.shape[0])
    for _ in range(max_powers):
        power = power @ A_iter
        shifted = rows @ power
        added = False
        for a, b in zip(shifted, offsets):
            added |= try_add(a.copy(), float(b))
        if not added:
            break
    else:
        raise RuntimeError(
            f"no fixed point within {max_powers} matrix powers; the closed "
            "loop is too close to marginal stability"
        )

    # Early rows can become redundant once later powers tighten the set;
    # sweep them out so the facet list is minimal.
    keep = list(range(len(H)))
    i = 0
    while i < len(keep):
        others = [j for j in keep if j != keep[i]]
        if others:
            sup = _support([H[j] for j in others], [k[j] for j in others],
                           H[keep[i]])
            if sup <= k[keep[i]] + _REDUNDANCY_TOL:
                keep.pop(i)
                continue
        i += 1
    return PolyhedralSet(np.array([H[j] for j in keep]),
                         np.array([k[j] for j in keep]))


def terminal_set_to_dict(ts):
    if isinstance(ts, EllipsoidSet):
        return {
            "type": "ellipsoid",
            "P": ts.P.tolist(),
            "rho": ts.rho,
            "K": ts.K.tolist(),
        }
    if isinstance(ts, PolyhedralSet):
        return {"type": "polyhedron", "H": ts.H.tolist(), "k": ts.k.tolist()}
    raise TypeError(f"not a terminal set: {type(ts).__name__}")


def terminal_set_from_dict(d):
    kind = d.get("type")
    if kind == "ellipsoid":
        return EllipsoidSet(d["P"], d["rho"], d["K"])
    if kind == "polyhedron":
        return PolyhedralSet(d["H"], d["k"])
    raise ValueError(f"unknown terminal set type: {kind!r}")


def load_terminal_set(path):
    with open(path, "r", encoding="utf-8") as fh:
        return terminal_set_from_dict(json.load(fh))


def save_terminal_set(ts, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(terminal_set_to_dict(ts), fh, indent=2)
        fh.write("\n")
