"""Convex functions, constraint systems, and the squared-violation merit.

Every function handled here is either affine, ``q'x + c``, or convex
quadratic, ``0.5 x'Q x + q'x + c`` with ``Q`` symmetric positive
semidefinite.  A :class:`FeasibilityProblem` bundles inequality constraints
``f_i(x) <= 0`` and affine equality constraints ``c_j'x = d_j`` and exposes
the merit function

    F(x) = 0.5 * sum_i max(f_i(x), 0)^2 + 0.5 * sum_j (c_j'x - d_j)^2

together with its gradient and a generalized Hessian, which is what the
Newton-type solvers in :mod:`anytime_mpc.feasibility` iterate on.
"""

from __future__ import annotations

import json
import numbers

import numpy as np

# Relative asymmetry beyond this is treated as a caller bug rather than
# floating-point noise.
_SYMMETRY_RTOL = 1e-12
# Eigenvalues below -tol * ||Q|| fail the positive-semidefiniteness check.
_PSD_RTOL = 1e-9


def _as_vector(v, n=None, name="vector"):
    a = np.array(v, dtype=float).reshape(-1)
    if n is not None and a.shape != (n,):
        raise ValueError(f"{name} has shape {a.shape}, expected ({n},)")
    return a


def _as_matrix(m, shape=None, name="matrix"):
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={a.ndim}")
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    return a


def _freeze(a):
    a.setflags(write=False)
    return a


class ConvexFunction:
    """Affine or convex quadratic function of ``x`` in R^n.

    Parameters
    ----------
    quadratic : (n, n) array or None
        Quadratic form matrix ``Q``; ``None`` means the function is affine.
        The stored matrix is the symmetrized input ``(Q + Q') / 2``; inputs
        asymmetric beyond floating-point noise are rejected.
    linear : (n,) array
        Gradient-at-origin coefficient vector ``q``.
    offset : float
        Constant term ``c``.

    Notes
    -----
    The value convention is ``0.5 x'Q x + q'x + c``.  Positive
    semidefiniteness of ``Q`` is validated with an eigenvalue computation
    when Python runs with assertions enabled; under ``python -O`` the check
    is skipped so construction stays cheap in hot loops.
    """

    __slots__ = ("Q", "q", "c")

    def __init__(self, quadratic, linear, offset=0.0):
        self.q = _freeze(_as_vector(linear, name="linear coefficient"))
        if not isinstance(offset, numbers.Real):
            raise ValueError("offset must be a real scalar")
        self.c = float(offset)
        if quadratic is None:
            self.Q = None
        else:
            n = self.q.shape[0]
            Q = _as_matrix(quadratic, (n, n), name="quadratic matrix")
            asym = np.abs(Q - Q.T).max()
            scale = max(1.0, np.abs(Q).max())
            if asym > _SYMMETRY_RTOL * scale:
                raise ValueError(
                    f"quadratic matrix asymmetry {asym:.3e} exceeds "
                    f"{_SYMMETRY_RTOL:.1e} * scale"
                )
            Q = 0.5 * (Q + Q.T)
            if __debug__:
                w_min = np.linalg.eigvalsh(Q)[0]
                if w_min < -_PSD_RTOL * scale:
                    raise ValueError(
                        f"quadratic matrix has eigenvalue {w_min:.3e}, "
                        "not positive semidefinite"
                    )
            self.Q = _freeze(Q)

    @classmethod
    def affine(cls, linear, offset=0.0):
        """Build ``q'x + c``."""
        return cls(None, linear, offset)

    @classmethod
    def quadratic(cls, quadratic, linear, offset=0.0):
        """Build ``0.5 x'Q x + q'x + c``."""
        if quadratic is None:
            raise ValueError("quadratic matrix must not be None")
        return cls(quadratic, linear, offset)

    @property
    def dim(self):
        return self.q.shape[0]

    @property
    def kind(self):
        return "affine" if self.Q is None else "quadratic"

    @property
    def is_affine(self):
        return self.Q is None

    def value(self, x):
        x = np.asarray(x, dtype=float)
        v = float(self.q @ x) + self.c
        if self.Q is not None:
            v += 0.5 * float(x @ (self.Q @ x))
        return v

    def gradient(self, x):
        if self.Q is None:
            return self.q.copy()
        return self.Q @ np.asarray(x, dtype=float) + self.q

    def hessian(self):
        if self.Q is None:
            return np.zeros((self.dim, self.dim))
        return self.Q.copy()

    def shifted(self, delta):
        """Same function with ``delta`` added to the constant term."""
        return ConvexFunction(self.Q, self.q, self.c + delta)

    def __repr__(self):
        return f"ConvexFunction(kind={self.kind!r}, dim={self.dim})"


class FeasibilityProblem:
    """Convex set ``C = {x : f_i(x) <= 0 for all i, c_j'x = d_j for all j}``.

    Parameters
    ----------
    n : int
        Ambient dimension.
    inequalities : sequence of ConvexFunction
        The functions ``f_i``; may be empty.
    equalities : sequence of (vector, scalar) pairs
        Affine equality rows ``(c_j, d_j)`` meaning ``c_j'x = d_j``.

    The constraint order given at construction is preserved everywhere:
    ``residuals`` reports values in that order and ``active_set`` returns
    indices into it.  Instances are immutable; the arrays handed out by the
    evaluation methods are fresh copies.
    """

    def __init__(self, n, inequalities, equalities=()):
        self.n = int(n)
        if self.n <= 0:
            raise ValueError("dimension must be positive")
        self.inequalities = tuple(inequalities)
        for i, f in enumerate(self.inequalities):
            if not isinstance(f, ConvexFunction):
                raise TypeError(f"inequality {i} is not a ConvexFunction")
            if f.dim != self.n:
                raise ValueError(
                    f"inequality {i} has dimension {f.dim}, expected {self.n}"
                )
        eq_rows = []
        eq_rhs = []
        for j, (cj, dj) in enumerate(equalities):
            eq_rows.append(_as_vector(cj, self.n, name=f"equality row {j}"))
            eq_rhs.append(float(dj))
        self.m = len(self.inequalities)
        self.m_eq = len(eq_rows)
        self._A_eq = _freeze(
            np.array(eq_rows) if eq_rows else np.zeros((0, self.n))
        )
        self._d_eq = _freeze(np.array(eq_rhs) if eq_rhs else np.zeros(0))
        # Constant equality contribution to every generalized Hessian.
        self._eq_gram = _freeze(self._A_eq.T @ self._A_eq)

        # Pack affine inequalities into one matrix so bulk evaluation is a
        # single matrix-vector product; quadratic ones stay as a short list.
        aff_idx = [i for i, f in enumerate(self.inequalities) if f.is_affine]
        self._aff_idx = _freeze(np.array(aff_idx, dtype=int))
        if aff_idx:
            self._A_aff = _freeze(
                np.array([self.inequalities[i].q for i in aff_idx])
            )
            self._c_aff = _freeze(
                np.array([self.inequalities[i].c for i in aff_idx])
            )
        else:
            self._A_aff = _freeze(np.zeros((0, self.n)))
            self._c_aff = _freeze(np.zeros(0))
        self._quads = tuple(
            (i, f) for i, f in enumerate(self.inequalities) if not f.is_affine
        )

    @property
    def equalities(self):
        return tuple(
            (self._A_eq[j].copy(), float(self._d_eq[j]))
            for j in range(self.m_eq)
        )

    def _check_dim(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.n,):
            raise ValueError(f"point has shape {x.shape}, expected ({self.n},)")
        return x

    def residuals(self, x):
        """Return ``(f, e)``: inequality values and equality residuals at x."""
        x = self._check_dim(x)
        f = np.empty(self.m)
        if self._aff_idx.size:
            f[self._aff_idx] = self._A_aff @ x + self._c_aff
        for i, fn in self._quads:
            f[i] = fn.value(x)
        e = self._A_eq @ x - self._d_eq
        return f, e

    def max_violation(self, x):
        """Worst constraint violation at ``x`` (0 when x is in the set)."""
        f, e = self.residuals(x)
        worst = 0.0
        if f.size:
            worst = max(worst, float(f.max()))
        if e.size:
            worst = max(worst, float(np.abs(e).max()))
        return worst

    def merit(self, x):
        """Half the squared norm of violations, ``F(x)``; zero iff x in C."""
        f, e = self.residuals(x)
        fp = np.maximum(f, 0.0)
        return 0.5 * (float(fp @ fp) + float(e @ e))

    def merit_gradient(self, x):
        """Gradient of ``F``: sum of ``max(f_i,0) grad f_i`` plus equality pull."""
        x = self._check_dim(x)
        f, e = self.residuals(x)
        g = self._A_eq.T @ e
        fp = np.maximum(f, 0.0)
        if self._aff_idx.size:
            g += self._A_aff.T @ fp[self._aff_idx]
        for i, fn in self._quads:
            if fp[i] > 0.0:
                g += fp[i] * fn.gradient(x)
        return g

    def active_set(self, x):
        """Indices ``i`` with ``f_i(x) >= 0``, sorted ascending."""
        f, _ = self.residuals(x)
        return np.flatnonzero(f >= 0.0)

    def generalized_hessian(self, x, mode="full", active=None):
        """An element of the generalized Hessian of ``F`` at ``x``.

        ``mode="full"`` sums ``grad f_i grad f_i' + f_i(x) hess f_i`` over the
        active indices plus the equality Gram matrix.  ``mode="gauss_newton"``
        drops the curvature terms ``f_i(x) hess f_i``; that variant is only a
        sound surrogate when the constraint set is known to be nonempty, so
        callers opt into it explicitly.
        """
        if mode not in ("full", "gauss_newton"):
            raise ValueError(f"unknown Hessian mode {mode!r}")
        x = self._check_dim(x)
        if active is None:
            active = self.active_set(x)
        H = self._eq_gram.copy()
        act = np.asarray(active, dtype=int)
        if act.size:
            mask = np.isin(self._aff_idx, act, assume_unique=True)
            if mask.any():
                A = self._A_aff[mask]
                H += A.T @ A
            act_set = set(act.tolist())
            for i, fn in self._quads:
                if i in act_set:
                    g = fn.gradient(x)
                    H += np.outer(g, g)
                    if mode == "full":
                        H += fn.value(x) * fn.Q
        return H

    def __repr__(self):
        return (
            f"FeasibilityProblem(n={self.n}, m={self.m}, m_eq={self.m_eq})"
        )


class OptimizationProblem:
    """Minimize a convex objective over a :class:`FeasibilityProblem` set."""

    def __init__(self, objective, constraints):
        if not isinstance(objective, ConvexFunction):
            raise TypeError("objective must be a ConvexFunction")
        if not isinstance(constraints, FeasibilityProblem):
            raise TypeError("constraints must be a FeasibilityProblem")
        if objective.dim != constraints.n:
            raise ValueError(
                f"objective dimension {objective.dim} does not match "
                f"constraint dimension {constraints.n}"
            )
        self.objective = objective
        self.constraints = constraints

    @property
    def n(self):
        return self.constraints.n

    def __repr__(self):
        return f"OptimizationProblem(n={self.n}, m={self.constraints.m})"


def function_to_dict(f):
    d = {"q": f.q.tolist(), "c": f.c}
    if f.Q is not None:
        d["Q"] = f.Q.tolist()
    return d


def function_from_dict(d, n=None):
    q = d["q"]
    if n is not None and len(q) != n:
        raise ValueError(f"function has dimension {len(q)}, expected {n}")
    return ConvexFunction(d.get("Q"), q, d.get("c", 0.0))


def problem_to_dict(problem):
    """Serialize an OptimizationProblem to plain JSON-ready structures."""
    cons = problem.constraints
    return {
        "n": cons.n,
        "objective": function_to_dict(problem.objective),
        "inequalities": [function_to_dict(f) for f in cons.inequalities],
        "equalities": [
            {"a": a.tolist(), "d": d} for a, d in cons.equalities
        ],
    }


def problem_from_dict(d):
    """Inverse of :func:`problem_to_dict`.

    A missing ``"objective"`` entry is read as the zero objective, which
    turns the optimization into a pure feasibility question.
    """
    n = int(d["n"])
    ineqs = [function_from_dict(fd, n) for fd in d.get("inequalities", [])]
    eqs = [(ed["a"], ed["d"]) for ed in d.get("equalities", [])]
    constraints = FeasibilityProblem(n, ineqs, eqs)
    if "objective" in d:
        objective = function_from_dict(d["objective"], n)
    else:
        objective = ConvexFunction.affine(np.zeros(n), 0.0)
    return OptimizationProblem(objective, constraints)


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def save_problem(problem, path):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem), fh, indent=2)
        fh.write("\n")
