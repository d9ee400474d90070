"""Joint-action selection: correlated equilibrium LPs and Nash best response.

Under normal communication the agents pool their Q-value slices and draw the
joint action from the welfare-maximizing correlated equilibrium.  When an
agent is isolated, the remaining agents average its action axis out of every
Q tensor under a belief vector and solve the same program over their own
joint actions.  The Nash baseline replaces the LP with synchronous
best-response iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .lp import LpInfeasibleError, LpUnboundedError

log = logging.getLogger(__name__)

CE_CHECK_TOL = 1e-8


@dataclass(frozen=True)
class QSlice:
    """One agent's estimated Q over the joint action space.

    values has one axis per agent (shared axis order across slices); entry
    [a_1, ..., a_n] is this agent's value for that joint action.
    """

    agent_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite Q values for agent {self.agent_id}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class JointDistribution:
    probs: np.ndarray  # same shape as the Q tensors

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-8:
            raise ValueError("not a probability distribution")
        object.__setattr__(self, "probs", np.clip(p, 0.0, None))


@lru_cache(maxsize=256)
def _cell_columns(shape: tuple) -> tuple:
    """Per agent: flat column indices grouped by that agent's action."""
    n_cells = int(np.prod(shape))
    flat = np.arange(n_cells).reshape(shape)
    return tuple(np.ascontiguousarray(np.moveaxis(flat, i, 0).reshape(shape[i], -1))
                 for i in range(len(shape)))


def _deviation_rows(tensors: list[np.ndarray]) -> np.ndarray:
    """Stack the CE deviation constraints as rows of A_ub (b_ub = 0).

    For agent i and actions (a, a'): following recommendation a must pay at
    least as much as switching to a', i.e.
    sum_rest Pr[a, rest] * (Q_i[a, rest] - Q_i[a', rest]) >= 0,
    stored negated for the <= 0 convention.
    """
    shape = tensors[0].shape
    n_cells = tensors[0].size
    columns = _cell_columns(shape)
    n_rows = sum(m * (m - 1) for m in shape)
    A = np.zeros((n_rows, n_cells))
    r = 0
    for i, q in enumerate(tensors):
        m = shape[i]
        if m < 2:
            continue
        qp = np.moveaxis(q, i, 0).reshape(m, -1)
        for a in range(m):
            diffs = qp[a][None, :] - qp           # row a': Q(a,.) - Q(a',.)
            others = [ap for ap in range(m) if ap != a]
            A[r:r + m - 1, columns[i][a]] = -diffs[others]
            r += m - 1
    return A


def _solve_ce_lp(tensors: list[np.ndarray]) -> np.ndarray:
    shape = tensors[0].shape
    n_cells = tensors[0].size
    c = np.zeros(n_cells)
    for q in tensors:
        c += q.reshape(-1)
    a_ub = _deviation_rows(tensors)
    b_ub = np.zeros(a_ub.shape[0])
    a_eq = np.ones((1, n_cells))
    b_eq = np.ones(1)
    status, x, _ = _kernels.lp_solve_dense(
        c, np.ascontiguousarray(a_ub), b_ub, a_eq, b_eq)
    if status == _kernels.LP_INFEASIBLE:
        raise LpInfeasibleError("correlated-equilibrium LP infeasible")
    if status == _kernels.LP_UNBOUNDED:
        raise LpUnboundedError("correlated-equilibrium LP unbounded")
    if status == _kernels.LP_ITERLIMIT:
        raise RuntimeError("simplex iteration limit in CE solve")
    if status == _kernels.LP_NUMERIC:
        raise RuntimeError("simplex basis numerically unreliable in CE solve")
    x = np.clip(x, 0.0, None)
    total = x.sum()
    if not 0.999 < total < 1.001:
        raise RuntimeError(f"simplex drifted off the simplex: sum={total}")
    return (x / total).reshape(shape)


def greedy_action(values: np.ndarray, axis: int) -> int:
    """Own-axis argmax of the mean over all peer axes (lowest index on ties)."""
    peer_axes = tuple(a for a in range(values.ndim) if a != axis)
    marginal = values.mean(axis=peer_axes) if peer_axes else values
    return int(np.argmax(marginal))


def _greedy_distribution(tensors: list[np.ndarray]) -> JointDistribution:
    probs = np.zeros(tensors[0].shape)
    cell = tuple(greedy_action(q, i) for i, q in enumerate(tensors))
    probs[cell] = 1.0
    return JointDistribution(probs)


def solve_full_ce(slices: list[QSlice]) -> JointDistribution:
    """Welfare-maximizing correlated equilibrium of the agents' Q slices.

    Falls back to the independent greedy profile if the LP fails
    numerically (the equilibrium polytope is never empty in exact
    arithmetic).
    """
    tensors = [s.values for s in slices]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ValueError("Q slices must share one joint-action domain")
    if len(slices) != len(shape):
        raise ValueError("need exactly one slice per agent axis")
    try:
        return JointDistribution(_solve_ce_lp(tensors))
    except (LpInfeasibleError, LpUnboundedError, RuntimeError) as exc:
        log.warning("CE solve failed (%s); falling back to independent greedy", exc)
        return _greedy_distribution(tensors)


def solve_belief_ce(slices: list[QSlice], beliefs: dict[int, np.ndarray]) -> JointDistribution:
    """Correlated equilibrium over the normal agents' actions.

    beliefs maps each isolated agent's tensor axis to a probability vector
    over its actions; the axes are averaged out of every slice and the
    reduced game is solved like solve_full_ce.  With a one-hot belief this
    reduces to the full CE with that agent's action pinned.
    """
    if not beliefs:
        raise ValueError("need at least one isolated-agent belief")
    for axis, b in beliefs.items():
        b = np.asarray(b, dtype=float)
        if b.size == 0 or b.sum() <= 0:
            raise ValueError(f"empty or zero belief for axis {axis}")
    tensors = [s.values for s in slices]
    for axis in sorted(beliefs, reverse=True):
        b = np.asarray(beliefs[axis], dtype=float)
        b = b / b.sum()
        tensors = [np.tensordot(t, b, axes=([axis], [0])) for t in tensors]
    reduced = [QSlice(s.agent_id, t) for s, t in zip(slices, tensors)]
    return solve_full_ce(reduced)


def ce_constraint_residual(dist: JointDistribution, slices: list[QSlice]) -> float:
    """Largest violation of the deviation and simplex constraints.

    Computed straight from the Q tensors, independent of the LP assembly,
    so it double-checks the solver.
    """
    p = dist.probs
    worst = abs(p.sum() - 1.0)
    worst = max(worst, float(-p.min()) if p.size else 0.0)
    for i, s in enumerate(slices):
        q = s.values
        m = q.shape[i]
        qp = np.moveaxis(q, i, 0).reshape(m, -1)
        pp = np.moveaxis(p, i, 0).reshape(m, -1)
        for a in range(m):
            gains = (pp[a][None, :] * (qp - qp[a][None, :])).sum(axis=1)
            worst = max(worst, float(gains.max(initial=0.0)))
    return worst


def ce_objective(dist: JointDistribution, slices: list[QSlice]) -> float:
    return float(sum((dist.probs * s.values).sum() for s in slices))


def nash_iterate(utilities: list[np.ndarray], max_rounds: int) -> tuple[tuple, int, bool]:
    """Synchronous best-response iteration from the greedy profile.

    Returns (profile, rounds used, converged).  A converged profile is a
    pure Nash equilibrium: every agent's action is a best response to the
    others.  Each round stands for one message exchange per agent.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    shape = utilities[0].shape
    profile = tuple(greedy_action(u, i) for i, u in enumerate(utilities))
    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        best = []
        for i, u in enumerate(utilities):
            idx = tuple(slice(None) if a == i else profile[a] for a in range(len(shape)))
            best.append(int(np.argmax(u[idx])))
        new_profile = tuple(best)
        if new_profile == profile:
            return profile, rounds, True
        profile = new_profile
    return profile, rounds, False


def sample_joint_action(dist: JointDistribution, rng: np.random.Generator) -> tuple:
    """Draw one joint action (multi-index) from the distribution."""
    flat = dist.probs.reshape(-1)
    cum = np.cumsum(flat)
    idx = int(np.searchsorted(cum / cum[-1], rng.random(), side="right"))
    idx = min(idx, flat.size - 1)
    return tuple(int(v) for v in np.unravel_index(idx, dist.probs.shape))
