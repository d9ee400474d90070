"""Dense linear programs over the Bland-rule simplex kernel.

Problems are stated as: maximize objective . x subject to inequality rows
A_ub x <= b_ub, equality rows A_eq x = b_eq, and 0 <= x <= upper.  Bland's
pivoting rule makes the returned basic solution deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class LpInfeasibleError(Exception):
    pass


class LpUnboundedError(Exception):
    pass


def _empty_rows(n: int) -> np.ndarray:
    return np.zeros((0, n))


@dataclass(frozen=True)
class LpProblem:
    objective: np.ndarray
    a_ub: np.ndarray = None
    b_ub: np.ndarray = None
    a_eq: np.ndarray = None
    b_eq: np.ndarray = None
    # scalar upper bound applied to every variable; np.inf disables it
    upper: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float)
        n = c.shape[0]
        a_ub = _empty_rows(n) if self.a_ub is None else np.asarray(self.a_ub, dtype=float)
        b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=float)
        a_eq = _empty_rows(n) if self.a_eq is None else np.asarray(self.a_eq, dtype=float)
        b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float)
        if a_ub.shape != (b_ub.shape[0], n) or a_eq.shape != (b_eq.shape[0], n):
            raise ValueError("inconsistent constraint dimensions")
        for name, val in (("objective", c), ("a_ub", a_ub), ("b_ub", b_ub),
                          ("a_eq", a_eq), ("b_eq", b_eq)):
            object.__setattr__(self, name if name != "objective" else "objective", val)


def lp_solve(problem: LpProblem) -> tuple[np.ndarray, float]:
    """Solve an LpProblem; returns (x, objective value)."""
    c = problem.objective
    n = c.shape[0]
    a_ub, b_ub = problem.a_ub, problem.b_ub
    if np.isfinite(problem.upper):
        a_ub = np.vstack([a_ub, np.eye(n)])
        b_ub = np.concatenate([b_ub, np.full(n, problem.upper)])
    status, x, value = _kernels.lp_solve_dense(
        np.ascontiguousarray(c), np.ascontiguousarray(a_ub),
        np.ascontiguousarray(b_ub), np.ascontiguousarray(problem.a_eq),
        np.ascontiguousarray(problem.b_eq))
    if status == _kernels.LP_INFEASIBLE:
        raise LpInfeasibleError("no feasible point")
    if status == _kernels.LP_UNBOUNDED:
        raise LpUnboundedError("objective unbounded over the feasible region")
    if status == _kernels.LP_ITERLIMIT:
        raise RuntimeError("simplex iteration limit reached")
    if status == _kernels.LP_NUMERIC:
        raise RuntimeError("simplex basis numerically unreliable")
    return x, value
