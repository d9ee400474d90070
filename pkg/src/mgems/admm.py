"""Model-based baseline: slot-wise consensus ADMM on the relaxed dispatch.

Each slot the discrete dispatch is relaxed (device bits to [0,1], ESS mode
to [-1,1]) and split across the three agents as consensus ADMM: every agent
keeps a local copy of the decision vector, minimizes its own cost plus the
quadratic penalty in closed form, and the consensus step prices net grid
power at the real asymmetric tariffs (import at the grid price, export at
the feed-in price).  Internal trades are valued at the ladder projection of
the previous slot's clearing price, which keeps every subproblem a
box-clipped quadratic.  The converged point is rounded back to the discrete
action space, honoring forced service and SOC bounds.  The relaxation is
deliberately myopic (one slot at a time), so stored energy carries no value
into later slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid_model import (ESS_CHARGE, ESS_DISCHARGE_BASE, ESS_IDLE, JointAction)

AGENT_AXES = ("dsm", "pv", "ess")


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    max_iters: int = 200

    def __post_init__(self):
        if self.rho <= 0 or self.tol_primal <= 0 or self.tol_dual <= 0:
            raise ValueError("rho and tolerances must be positive")


@dataclass(frozen=True)
class SlotContext:
    """Everything one slot's dispatch problem needs."""

    p_hat: float                 # internal price (ladder-projected last clearing)
    p_grid: float
    feed_in: float
    pv_power: float
    device_powers: np.ndarray    # (D,)
    allowed: np.ndarray          # (D,) bool, device may run
    forced: np.ndarray           # (D,) bool, device must run
    q_lo: float                  # -1 if charging feasible else 0
    q_hi: float                  # +1 if discharging feasible else 0
    active: np.ndarray           # (3,) bool, False for isolated agents


@dataclass
class AdmmState:
    x: np.ndarray   # (3, D+1) local copies
    u: np.ndarray   # (3, D+1) scaled duals
    z: np.ndarray   # (D+1,) consensus vector
    rho: float


def _dsm_box(ctx: SlotContext):
    glo = np.where(ctx.forced, 1.0, 0.0)
    ghi = np.where(ctx.allowed, 1.0, 0.0)
    ghi = np.maximum(ghi, glo)
    return glo, ghi


def _greedy_dsm(ctx: SlotContext) -> np.ndarray:
    """Isolated DSM runs only what it must (pure cost minimization)."""
    return np.where(ctx.forced, 1.0, 0.0)


def _greedy_q(ctx: SlotContext) -> float:
    """Isolated ESS discharges whenever it can (immediate revenue)."""
    return ctx.q_hi


def init_state(ctx: SlotContext, config: AdmmConfig) -> AdmmState:
    d = ctx.device_powers.shape[0]
    z = np.zeros(d + 1)
    z[:d] = np.where(ctx.forced, 1.0, 0.0)
    x = np.tile(z, (3, 1))
    u = np.zeros((3, d + 1))
    return AdmmState(x=x, u=u, z=z, rho=config.rho)


def _kernel_inputs(ctx: SlotContext, charge_power: float):
    d = ctx.device_powers.shape[0]
    dim = d + 1
    lin = np.zeros((3, dim))
    lo = np.zeros((3, dim))
    hi = np.ones((3, dim))
    lo[:, d] = -1.0

    glo, ghi = _dsm_box(ctx)
    lin[0, :d] = ctx.p_hat * ctx.device_powers
    lo[0, :d] = glo
    hi[0, :d] = ghi
    lin[2, d] = -ctx.p_hat * charge_power
    lo[2, d] = ctx.q_lo
    hi[2, d] = ctx.q_hi

    # net grid import as a function of the consensus vector; frozen agents'
    # contributions move into the constant offset
    cvec = np.zeros(dim)
    offset = -ctx.pv_power
    if ctx.active[0]:
        cvec[:d] = ctx.device_powers
    else:
        offset += float(ctx.device_powers @ _greedy_dsm(ctx))
    if ctx.active[2]:
        cvec[d] = -charge_power
    else:
        offset += -charge_power * _greedy_q(ctx)
    return lin, lo, hi, cvec, offset


def admm_step(state: AdmmState, config: AdmmConfig, ctx: SlotContext,
              charge_power: float = 20.0) -> tuple[AdmmState, float, float]:
    """One ADMM iteration; returns (state, primal residual, dual residual)."""
    lin, lo, hi, cvec, offset = _kernel_inputs(ctx, charge_power)
    active = np.ascontiguousarray(ctx.active, dtype=np.bool_)
    _, r, s, _ = _kernels.admm_consensus(
        lin, lo, hi, active, cvec, offset, ctx.feed_in, ctx.p_grid,
        state.rho, config.tol_primal, config.tol_dual, 1,
        state.x, state.u, state.z)
    return state, float(r), float(s)


def admm_solve(ctx: SlotContext, config: AdmmConfig,
               charge_power: float = 20.0) -> tuple[AdmmState, int, bool]:
    """Iterate to convergence (or max_iters); returns (state, iters, converged)."""
    state = init_state(ctx, config)
    if not ctx.active.any():
        return state, 0, True
    lin, lo, hi, cvec, offset = _kernel_inputs(ctx, charge_power)
    active = np.ascontiguousarray(ctx.active, dtype=np.bool_)
    iters, _, _, converged = _kernels.admm_consensus(
        lin, lo, hi, active, cvec, offset, ctx.feed_in, ctx.p_grid,
        state.rho, config.tol_primal, config.tol_dual, config.max_iters,
        state.x, state.u, state.z)
    return state, int(iters), bool(converged)


def slot_objective(ctx: SlotContext, g_vals: np.ndarray, q: float,
                   charge_power: float = 20.0) -> float:
    """Relaxed slot cost at a candidate point (used by oracles and rounding)."""
    net = float(ctx.device_powers @ g_vals) - charge_power * q - ctx.pv_power
    grid = max(ctx.feed_in * net, ctx.p_grid * net)
    return float(ctx.p_hat * (ctx.device_powers @ g_vals)
                 - ctx.p_hat * charge_power * q + grid)


def project_bid(price: float, ladder, p_grid: float) -> int:
    """Nearest ladder index whose price would be accepted by the market."""
    candidates = [k for k, p in enumerate(ladder) if p <= p_grid + 1e-12]
    if not candidates:
        candidates = [0]
    return min(candidates, key=lambda k: (abs(ladder[k] - price), k))


def round_dispatch(state: AdmmState, ctx: SlotContext, ladder) -> JointAction:
    """Round the converged relaxation to a feasible discrete joint action.

    DSM bits first (threshold 0.5, forced bits pinned on), then ESS mode to
    the nearest feasible of {-1, 0, 1}, then both bids projected onto the
    acceptable part of the price ladder.
    """
    d = ctx.device_powers.shape[0]
    if ctx.active[0]:
        bits = (state.z[:d] > 0.5) & ctx.allowed
        bits |= ctx.forced
    else:
        bits = _greedy_dsm(ctx) > 0.5
    mask = int(sum(1 << g for g in range(d) if bits[g]))

    qz = state.z[d] if ctx.active[2] else _greedy_q(ctx)
    if qz < -0.5:
        q = -1
    elif qz > 0.5:
        q = 1
    else:
        q = 0
    q = int(min(max(q, ctx.q_lo), ctx.q_hi))

    bid = project_bid(ctx.p_hat, ladder, ctx.p_grid)
    if q == -1:
        ess_action = ESS_CHARGE
    elif q == 0:
        ess_action = ESS_IDLE
    else:
        ess_action = ESS_DISCHARGE_BASE + bid
    return JointAction(dsm_mask=mask, pv_bid=bid, ess_action=ess_action)


def admm_dispatch(ctx: SlotContext, config: AdmmConfig, ladder,
                  charge_power: float = 20.0):
    """Solve and round one slot; returns (action, iterations, converged)."""
    state, iters, converged = admm_solve(ctx, config, charge_power)
    return round_dispatch(state, ctx, ladder), iters, converged
