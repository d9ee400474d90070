"""Bidding-based uniform-clearing-price market and reward settlement.

Suppliers submit (capacity, bid) offers, consumers submit firm demands.
Offers are accepted in merit order (ascending bid) until demand is met; the
marginal accepted bid sets the uniform clearing price.  The main grid is the
backstop: it supplies any shortfall at its own price (which then sets the
clearing price) and buys any surplus from participating offers at the
feed-in price.  Offers bidding above the grid price find no buyer and are
curtailed.  Slots are one hour, so kW and kWh are numerically the same.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

DSM = "dsm"
PV = "pv"
ESS = "ess"

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupplyOffer:
    agent_id: str
    capacity: float  # kW
    bid: float       # $/kWh

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("offer capacity must be >= 0")


@dataclass(frozen=True)
class DemandRequest:
    agent_id: str
    demand: float  # kW

    def __post_init__(self):
        if self.demand < 0:
            raise ValueError("demand must be >= 0")


@dataclass(frozen=True)
class PvCost:
    """Quadratic generation cost: beta*P^2 + zeta*P + phi."""

    beta: float = 0.001
    zeta: float = 0.02
    phi: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0 (convex cost)")

    def __call__(self, power: float) -> float:
        return self.beta * power * power + self.zeta * power + self.phi


@dataclass(frozen=True)
class ClearingResult:
    clearing_price: float
    dispatch: dict[str, float]
    grid_import: float
    grid_export: dict[str, float]
    p_grid: float
    feed_in_price: float
    curtailed: dict[str, float] = field(default_factory=dict)

    def supplied(self, agent_id: str) -> float:
        """Marketed power of a supplier: locally dispatched plus exported."""
        return self.dispatch.get(agent_id, 0.0) + self.grid_export.get(agent_id, 0.0)


def clear_market(offers, demands, p_grid: float = 0.16,
                 feed_in_frac: float = 0.4) -> ClearingResult:
    """Clear one slot.

    Equal-bid offers split the marginal quantity pro-rata by capacity, so
    the result does not depend on input order.  Degenerate inputs (no
    offers, zero demand) produce zero-trade results rather than errors.
    """
    feed_in = feed_in_frac * p_grid
    eligible = []
    curtailed = {}
    for o in offers:
        if o.bid <= p_grid + 1e-12:
            eligible.append(o)
        elif o.capacity > 0:
            log.debug("dropping offer %s: bid %.4f above grid price %.4f",
                      o.agent_id, o.bid, p_grid)
            curtailed[o.agent_id] = curtailed.get(o.agent_id, 0.0) + o.capacity

    total_demand = sum(d.demand for d in demands)
    dispatch = {o.agent_id: 0.0 for o in eligible}

    # group equal bids for pro-rata splitting, walk groups in merit order
    by_bid: dict[float, list[SupplyOffer]] = {}
    for o in eligible:
        by_bid.setdefault(o.bid, []).append(o)

    price = None
    remaining = total_demand
    for bid in sorted(by_bid):
        group = by_bid[bid]
        if remaining <= 1e-12:
            break
        group_cap = sum(o.capacity for o in group)
        if group_cap <= 0:
            continue
        take = min(remaining, group_cap)
        for o in group:
            dispatch[o.agent_id] += take * o.capacity / group_cap
        remaining -= take
        price = bid

    grid_import = 0.0
    if remaining > 1e-12:
        grid_import = remaining
        price = p_grid
    if price is None:
        price = p_grid  # zero local trade; nobody pays this price

    export = {}
    if grid_import == 0.0:
        for o in eligible:
            surplus = o.capacity - dispatch[o.agent_id]
            if surplus > 1e-12:
                export[o.agent_id] = export.get(o.agent_id, 0.0) + surplus

    return ClearingResult(clearing_price=price, dispatch=dispatch,
                          grid_import=grid_import, grid_export=export,
                          p_grid=p_grid, feed_in_price=feed_in,
                          curtailed=curtailed)


def settle_rewards(result: ClearingResult, dsm_kw: float, pv, pv_cost: PvCost,
                   ess_kw: float) -> dict[str, float]:
    """Per-agent dollar rewards for one slot.

    DSM pays the clearing price for its draw.  PV earns clearing-price
    revenue on dispatched power and feed-in revenue on exports, minus its
    quadratic generation cost on realized power.  ESS earns like a supplier
    when discharging, pays the clearing price when charging.
    """
    p = result.clearing_price
    pv_revenue = (result.dispatch.get(PV, 0.0) * p
                  + result.grid_export.get(PV, 0.0) * result.feed_in_price)
    if ess_kw > 0:
        ess_reward = (result.dispatch.get(ESS, 0.0) * p
                      + result.grid_export.get(ESS, 0.0) * result.feed_in_price)
    elif ess_kw < 0:
        ess_reward = ess_kw * p  # charging: buys |ess_kw| at the clearing price
    else:
        ess_reward = 0.0
    return {
        DSM: -dsm_kw * p,
        PV: pv_revenue - pv_cost(pv.power),
        ESS: ess_reward,
    }


def energy_balance_residual(result: ClearingResult, dsm_kw: float,
                            pv_kw: float, ess_kw: float) -> float:
    """P_pv + P_grid + P_ess - P_dsm with marketed quantities, signed.

    pv_kw and ess_kw are the marketed amounts (``result.supplied`` for
    suppliers, negative charge power for a charging ESS); grid power is
    import minus total export.
    """
    grid_kw = result.grid_import - sum(result.grid_export.values())
    return pv_kw + grid_kw + ess_kw - dsm_kw


def cash_flow_residual(result: ClearingResult, dsm_kw: float, ess_kw: float) -> float:
    """Money in minus money out across consumers, suppliers and grid."""
    p = result.clearing_price
    consumer_payments = dsm_kw * p + (-ess_kw * p if ess_kw < 0 else 0.0)
    supplier_receipts = (sum(result.dispatch.values()) * p
                         + sum(result.grid_export.values()) * result.feed_in_price)
    grid_receipts = result.grid_import * p
    grid_payments = sum(result.grid_export.values()) * result.feed_in_price
    return consumer_payments + grid_payments - supplier_receipts - grid_receipts
