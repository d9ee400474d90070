"""Physical model of the three microgrid agents.

DSM: sets of deferrable devices, each with an average power draw, an
operation window in hours-of-day and a required number of service hours.
PV: a solar generator whose realized output is the predicted bell profile
plus Gaussian prediction error.  ESS: a central battery with fixed
charge/discharge power and state-of-charge dynamics.

All state transitions are pure (value semantics): functions take a state
and return a new one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PRICE_LADDER = (0.05, 0.09, 0.13, 0.17, 0.21, 0.25)

# ESS action alphabet: charge, idle, then one discharge action per ladder price.
ESS_CHARGE = 0
ESS_IDLE = 1
ESS_DISCHARGE_BASE = 2

# sign convention: q = +1 discharge (supply), -1 charge (demand), 0 idle
_ESS_Q = {ESS_CHARGE: -1, ESS_IDLE: 0}


class ConstraintViolation(Exception):
    """An action breaks a device-window, service or SOC constraint."""


@dataclass(frozen=True)
class DeviceSet:
    """One set of deferrable devices (id, kW, window hours, service hours)."""

    id: int
    avg_power: float
    window_start: int
    window_end: int  # may be numerically < start: window wraps past midnight
    duration: int

    def __post_init__(self):
        if self.avg_power <= 0:
            raise ValueError(f"device {self.id}: avg_power must be positive")
        if self.duration < 1:
            raise ValueError(f"device {self.id}: duration must be >= 1")


@dataclass(frozen=True)
class GridParams:
    """Physical constants of the microgrid (device table, PV, ESS, horizon)."""

    devices: tuple[DeviceSet, ...]
    pv_capacity: float = 30.0
    pv_error_frac: float = 0.1
    ess_capacity: float = 120.0   # kWh
    ess_charge_power: float = 20.0  # kW, same magnitude for discharge
    soc_min: float = 0.0
    soc_max: float = 1.0
    soc_init: float = 0.4
    t_op: int = 24

    def __post_init__(self):
        if not (self.soc_min <= self.soc_init <= self.soc_max):
            raise ValueError("initial SOC outside limits")
        for dev in self.devices:
            start, end = device_window(dev, self.t_op)
            if dev.duration > end - start + 1:
                raise ValueError(f"device {dev.id}: duration exceeds its window")

    @property
    def soc_step(self) -> float:
        """SOC change per charging/discharging hour."""
        return self.ess_charge_power / self.ess_capacity


def default_devices() -> tuple[DeviceSet, ...]:
    """The five stock device sets (power kW, window hours, service hours)."""
    rows = [(1, 6.0, 1, 8, 2), (2, 15.0, 7, 13, 1), (3, 19.0, 10, 17, 1),
            (4, 10.0, 15, 22, 3), (5, 7.0, 20, 4, 1)]
    return tuple(DeviceSet(*row) for row in rows)


def default_grid_params() -> GridParams:
    return GridParams(devices=default_devices())


def device_window(dev: DeviceSet, t_op: int) -> tuple[int, int]:
    """Effective service window [start, end] inside one episode.

    A window that wraps past midnight is truncated at the episode horizon,
    since episodes are independent days and service must complete within
    the episode for the service guarantee to be checkable.
    """
    end = dev.window_end if dev.window_end >= dev.window_start else dev.window_end + 24
    return dev.window_start, min(end, t_op)


@dataclass(frozen=True)
class DsmState:
    t: int
    waiting: tuple[int, ...]
    remaining: tuple[int, ...]


@dataclass(frozen=True)
class PvState:
    t: int
    power: float


@dataclass(frozen=True)
class EssState:
    t: int
    soc: float


def _waiting_vector(t: int, remaining, devices, t_op: int) -> tuple[int, ...]:
    out = []
    for dev, rem in zip(devices, remaining):
        start, end = device_window(dev, t_op)
        out.append(t - start if start <= t <= end and rem > 0 else 0)
    return tuple(out)


def dsm_initial(params: GridParams) -> DsmState:
    remaining = tuple(dev.duration for dev in params.devices)
    return DsmState(t=1, waiting=_waiting_vector(1, remaining, params.devices, params.t_op),
                    remaining=remaining)


def ess_initial(params: GridParams) -> EssState:
    return EssState(t=1, soc=params.soc_init)


def dsm_allowed(state: DsmState, params: GridParams) -> tuple[bool, ...]:
    """Per device: may its bit be on at the current slot (in window, unserviced)."""
    out = []
    for dev, rem in zip(params.devices, state.remaining):
        start, end = device_window(dev, params.t_op)
        out.append(start <= state.t <= end and rem > 0)
    return tuple(out)


def dsm_forced(state: DsmState, params: GridParams) -> tuple[bool, ...]:
    """Per device: must its bit be on (remaining service equals remaining window)."""
    out = []
    for dev, rem, ok in zip(params.devices, state.remaining, dsm_allowed(state, params)):
        _, end = device_window(dev, params.t_op)
        out.append(ok and rem >= end - state.t + 1)
    return tuple(out)


def validate_dsm_mask(state: DsmState, mask: int, params: GridParams) -> None:
    allowed = dsm_allowed(state, params)
    forced = dsm_forced(state, params)
    for g in range(len(params.devices)):
        bit = (mask >> g) & 1
        if bit and not allowed[g]:
            raise ConstraintViolation(
                f"device {params.devices[g].id} on outside window or already serviced at t={state.t}")
        if forced[g] and not bit:
            raise ConstraintViolation(
                f"device {params.devices[g].id} must run at t={state.t} to finish in window")


def feasible_dsm_masks(state: DsmState, params: GridParams) -> list[int]:
    """All device on/off masks satisfying the window, service and forced rules."""
    allowed = dsm_allowed(state, params)
    forced = dsm_forced(state, params)
    base = sum(1 << g for g, f in enumerate(forced) if f)
    free = [g for g in range(len(params.devices)) if allowed[g] and not forced[g]]
    masks = []
    for combo in range(1 << len(free)):
        mask = base
        for j, g in enumerate(free):
            if (combo >> j) & 1:
                mask |= 1 << g
        masks.append(mask)
    return sorted(masks)


def dsm_power(state: DsmState, mask: int, params: GridParams) -> float:
    """Total DSM draw for an on/off mask, in kW."""
    validate_dsm_mask(state, mask, params)
    return sum(dev.avg_power for g, dev in enumerate(params.devices) if (mask >> g) & 1)


def advance_dsm(state: DsmState, mask: int, params: GridParams) -> DsmState:
    """Apply one slot of service and move to the next hour."""
    validate_dsm_mask(state, mask, params)
    remaining = tuple(rem - ((mask >> g) & 1)
                      for g, rem in enumerate(state.remaining))
    t = state.t + 1
    return DsmState(t=t, waiting=_waiting_vector(t, remaining, params.devices, params.t_op),
                    remaining=remaining)


def ess_q(action: int) -> int:
    return _ESS_Q.get(action, 1)


def ess_feasible_actions(state: EssState, params: GridParams,
                         ladder=PRICE_LADDER) -> list[int]:
    """ESS actions that keep SOC inside its limits after the step."""
    step = params.soc_step
    actions = [ESS_IDLE]
    if state.soc + step <= params.soc_max + 1e-9:
        actions.insert(0, ESS_CHARGE)
    if state.soc - step >= params.soc_min - 1e-9:
        actions.extend(ESS_DISCHARGE_BASE + k for k in range(len(ladder)))
    return actions


def ess_step(state: EssState, action: int, params: GridParams) -> tuple[EssState, float]:
    """Apply an ESS action; returns the new state and signed power (kW, +=supply)."""
    q = ess_q(action)
    soc = state.soc - params.soc_step * q
    if soc < params.soc_min - 1e-9 or soc > params.soc_max + 1e-9:
        raise ConstraintViolation(
            f"ESS action {action} would push SOC to {soc:.4f} outside "
            f"[{params.soc_min}, {params.soc_max}]")
    # snap float drift so repeated steps never creep past the limits
    if abs(soc - params.soc_min) < 1e-12:
        soc = params.soc_min
    elif abs(soc - params.soc_max) < 1e-12:
        soc = params.soc_max
    return EssState(t=state.t + 1, soc=soc), params.ess_charge_power * q


def ess_discharge_price(action: int, ladder=PRICE_LADDER) -> float:
    if action < ESS_DISCHARGE_BASE:
        raise ValueError("not a discharge action")
    return ladder[action - ESS_DISCHARGE_BASE]


def pv_predicted(t: int, params: GridParams) -> float:
    """Day-ahead PV forecast: sine bell over daylight hours, zero otherwise."""
    if t < 6 or t > 18:
        return 0.0
    return params.pv_capacity * max(0.0, math.sin(math.pi * (t - 6) / 12.0))


def pv_realize(t: int, params: GridParams, rng: np.random.Generator) -> PvState:
    """Realized PV power: forecast plus Gaussian error, clamped to [0, capacity]."""
    pred = pv_predicted(t, params)
    power = pred + rng.normal(0.0, params.pv_error_frac * pred)
    return PvState(t=t, power=float(min(max(power, 0.0), params.pv_capacity)))


@dataclass(frozen=True)
class JointAction:
    """One action per agent: DSM device mask, PV bid index, ESS action index."""

    dsm_mask: int
    pv_bid: int
    ess_action: int


class JointActionSpace:
    """Fixed enumeration of the joint action alphabet.

    Joint index = (dsm_mask * n_pv + pv_bid) * n_ess + ess_action.  The full
    alphabet is static (learners size their output heads by it); per-slot
    feasibility selects a subset of indices.
    """

    def __init__(self, n_devices: int, ladder=PRICE_LADDER):
        self.n_devices = n_devices
        self.ladder = tuple(ladder)
        self.n_dsm = 1 << n_devices
        self.n_pv = len(ladder)
        self.n_ess = 2 + len(ladder)
        self.size = self.n_dsm * self.n_pv * self.n_ess

    def encode(self, action: JointAction) -> int:
        return (action.dsm_mask * self.n_pv + action.pv_bid) * self.n_ess + action.ess_action

    def decode(self, index: int) -> JointAction:
        index, ess = divmod(index, self.n_ess)
        mask, pv = divmod(index, self.n_pv)
        return JointAction(dsm_mask=mask, pv_bid=pv, ess_action=ess)

    def combine(self, dsm_masks, pv_bids, ess_actions) -> np.ndarray:
        """Joint indices of the cartesian product of per-agent action lists."""
        idx = ((np.asarray(dsm_masks)[:, None] * self.n_pv
                + np.asarray(pv_bids)[None, :]) * self.n_ess)
        idx = idx[:, :, None] + np.asarray(ess_actions)[None, None, :]
        return idx.reshape(-1)


def feasible_joint_actions(dsm: DsmState, ess: EssState, params: GridParams,
                           space: JointActionSpace) -> np.ndarray:
    """Joint indices of every feasible joint action at the current slot.

    Never empty: idle/all-off is feasible unless forced service pins DSM bits,
    in which case those bits are on in every listed mask.
    """
    masks = feasible_dsm_masks(dsm, params)
    bids = list(range(space.n_pv))
    ess_actions = ess_feasible_actions(ess, params, space.ladder)
    return space.combine(masks, bids, ess_actions)
