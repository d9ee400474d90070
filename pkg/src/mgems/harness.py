"""Experiment driver: environment, episode loops, metrics, CSV and plots.

One episode is a 24-slot day.  Every slot each agent uploads a heartbeat
through the parameter server (its Q slice, equilibrium info or duals,
depending on the algorithm); a lost upload isolates that agent for the
slot.  Actions are chosen per algorithm, the market clears, rewards settle,
and physical state advances.  Per-slot energy and cash conservation are
audited and any violation raises.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import admm as admm_mod
from . import belief as belief_mod
from . import comm as comm_mod
from . import grid_model as gm
from . import market as mk
from .config import RunConfig
from .equilibrium import (QSlice, greedy_action, sample_joint_action,
                          solve_belief_ce, solve_full_ce, nash_iterate)
from .learner import (AgentLearner, Experience, epsilon_value)

log = logging.getLogger(__name__)

AGENTS = (mk.DSM, mk.PV, mk.ESS)
AGENT_AXIS = {mk.DSM: 0, mk.PV: 1, mk.ESS: 2}
SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "episode", "reward_dsm", "reward_pv", "reward_ess", "mg_reward",
    "dsm_cost", "mean_price", "grid_import_kwh", "grid_export_kwh",
    "messages", "failed_transmissions", "belief_accuracy", "loss", "epsilon",
    "energy_residual", "cash_residual",
)


class AuditError(Exception):
    """A conservation law failed inside the simulation."""


@dataclass
class RngStreams:
    """Independent named streams so concerns cannot perturb each other."""

    env: np.random.Generator
    policy: np.random.Generator
    comm: np.random.Generator
    obs: np.random.Generator
    learn: np.random.Generator

    NAMES = ("env", "policy", "comm", "obs", "learn")

    @classmethod
    def spawn(cls, seed: int) -> "RngStreams":
        return cls(**{name: np.random.default_rng([seed, k])
                      for k, name in enumerate(cls.NAMES)})


@dataclass
class FeasibleSets:
    dsm_masks: list
    pv_bids: list
    ess_actions: list
    joint: np.ndarray  # flat joint indices, C-ordered over (dsm, pv, ess)

    @property
    def shape(self) -> tuple:
        return (len(self.dsm_masks), len(self.pv_bids), len(self.ess_actions))

    def action_from_cell(self, cell) -> gm.JointAction:
        i, j, k = cell
        return gm.JointAction(dsm_mask=self.dsm_masks[i], pv_bid=self.pv_bids[j],
                              ess_action=self.ess_actions[k])

    def per_agent(self, agent: str) -> list:
        return (self.dsm_masks, self.pv_bids, self.ess_actions)[AGENT_AXIS[agent]]


class Environment:
    """Physical state plus the market; steps on joint actions."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.params = cfg.grid
        self.space = gm.JointActionSpace(len(cfg.grid.devices), cfg.market.price_ladder)
        d = len(cfg.grid.devices)
        self._wmax = np.array([max(1, e - s) for s, e in
                               (gm.device_window(dev, cfg.grid.t_op)
                                for dev in cfg.grid.devices)], dtype=float)
        self.d_in = {mk.DSM: 2 + d, mk.PV: 3, mk.ESS: 3}
        self.reset_needed = True

    def reset(self, rng_env: np.random.Generator) -> None:
        self.dsm = gm.dsm_initial(self.params)
        self.ess = gm.ess_initial(self.params)
        self.pv = gm.pv_realize(1, self.params, rng_env)
        self.last_price = self.cfg.market.p_grid
        self.reset_needed = False

    @property
    def t(self) -> int:
        return self.dsm.t

    @property
    def done(self) -> bool:
        return self.dsm.t > self.params.t_op

    def feasible(self) -> FeasibleSets:
        masks = gm.feasible_dsm_masks(self.dsm, self.params)
        bids = list(range(self.space.n_pv))
        ess_actions = gm.ess_feasible_actions(self.ess, self.params, self.space.ladder)
        joint = self.space.combine(masks, bids, ess_actions)
        return FeasibleSets(masks, bids, ess_actions, joint)

    def _angle(self) -> tuple:
        a = 2.0 * np.pi * (self.t - 1) / self.params.t_op
        return np.sin(a), np.cos(a)

    def encode(self, agent: str) -> np.ndarray:
        sin_a, cos_a = self._angle()
        if agent == mk.DSM:
            w = np.asarray(self.dsm.waiting, dtype=float) / self._wmax
            return np.concatenate(([sin_a, cos_a], w))
        if agent == mk.PV:
            return np.array([sin_a, cos_a, self.pv.power / self.params.pv_capacity])
        return np.array([sin_a, cos_a, self.ess.soc])

    def step(self, action: gm.JointAction, rng_env: np.random.Generator):
        """Clear the market for one slot and advance every physical state."""
        p = self.params
        m = self.cfg.market
        dsm_kw = gm.dsm_power(self.dsm, action.dsm_mask, p)
        ess_next, ess_kw = gm.ess_step(self.ess, action.ess_action, p)

        offers = [mk.SupplyOffer(mk.PV, self.pv.power, m.price_ladder[action.pv_bid])]
        demands = [mk.DemandRequest(mk.DSM, dsm_kw)]
        if ess_kw > 0:
            offers.append(mk.SupplyOffer(
                mk.ESS, ess_kw, gm.ess_discharge_price(action.ess_action, m.price_ladder)))
        elif ess_kw < 0:
            demands.append(mk.DemandRequest(mk.ESS, -ess_kw))

        result = mk.clear_market(offers, demands, m.p_grid, m.feed_in_frac)
        rewards = mk.settle_rewards(result, dsm_kw, self.pv, m.pv_cost, ess_kw)

        pv_marketed = result.supplied(mk.PV)
        ess_marketed = result.supplied(mk.ESS) if ess_kw > 0 else ess_kw
        e_res = mk.energy_balance_residual(result, dsm_kw, pv_marketed, ess_marketed)
        c_res = mk.cash_flow_residual(result, dsm_kw, ess_kw)
        if abs(e_res) > 1e-9:
            raise AuditError(f"energy balance violated at t={self.t}: {e_res}")
        if abs(c_res) > 1e-9:
            raise AuditError(f"cash conservation violated at t={self.t}: {c_res}")
        if not (p.soc_min - 1e-12 <= ess_next.soc <= p.soc_max + 1e-12):
            raise AuditError(f"SOC out of bounds at t={self.t}: {ess_next.soc}")

        self.dsm = gm.advance_dsm(self.dsm, action.dsm_mask, p)
        self.ess = ess_next
        t_next = self.dsm.t
        self.pv = (gm.pv_realize(t_next, p, rng_env) if t_next <= p.t_op
                   else gm.PvState(t_next, 0.0))
        self.last_price = result.clearing_price

        info = {
            "price": result.clearing_price,
            "grid_import": result.grid_import,
            "grid_export": sum(result.grid_export.values()),
            "curtailed": sum(result.curtailed.values()),
            "dsm_kw": dsm_kw,
            "energy_residual": abs(e_res),
            "cash_residual": abs(c_res),
        }
        return rewards, info


@dataclass
class MetricsRow:
    episode: int
    reward_dsm: float
    reward_pv: float
    reward_ess: float
    mg_reward: float
    dsm_cost: float
    mean_price: float
    grid_import_kwh: float
    grid_export_kwh: float
    messages: int
    failed_transmissions: int
    belief_accuracy: float
    loss: float
    epsilon: float
    energy_residual: float
    cash_residual: float

    def to_csv(self) -> list:
        return [repr(getattr(self, c)) if isinstance(getattr(self, c), float)
                else str(getattr(self, c)) for c in CSV_COLUMNS]


def make_observation_models(space: gm.JointActionSpace, fidelity: float) -> dict:
    sizes = {mk.DSM: space.n_dsm, mk.PV: space.n_pv, mk.ESS: space.n_ess}
    return {a: belief_mod.symmetric_model(sizes[a], fidelity) for a in AGENTS}


def make_belief_stores(space: gm.JointActionSpace, cfg: RunConfig) -> dict:
    sizes = {mk.DSM: space.n_dsm, mk.PV: space.n_pv, mk.ESS: space.n_ess}
    return {a: belief_mod.BeliefStore({p: sizes[p] for p in AGENTS if p != a},
                                      per_hour=cfg.belief.per_hour,
                                      init_count=cfg.belief.init_count)
            for a in AGENTS}


def build_learners(cfg: RunConfig, env: Environment, rng_learn, double: bool) -> dict:
    return {a: AgentLearner(a, env.d_in[a], env.space.size, cfg.learner,
                            rng_learn, double=double) for a in AGENTS}


def _true_actions(action: gm.JointAction) -> dict:
    return {mk.DSM: action.dsm_mask, mk.PV: action.pv_bid, mk.ESS: action.ess_action}


def _feasible_positions(agent: str, feas: FeasibleSets) -> list:
    return feas.per_agent(agent)


def _harvest_observations(stores, obs_models, feas, action, t, rng_obs, acc):
    """Every agent observes every peer; returns updated (hits, total)."""
    true_acts = _true_actions(action)
    hits, total = acc
    for observer in AGENTS:
        for peer in AGENTS:
            if peer == observer:
                continue
            prior = stores[observer].prior(peer, t)
            hits += int(np.argmax(prior)) == true_acts[peer]
            total += 1
            stores[observer].observe(peer, t, obs_models[peer], true_acts[peer], rng_obs)
    return hits, total


def _mean_peer_belief(stores, nas, pa_agent, t, positions, mode: str) -> np.ndarray:
    """Average the normal agents' priors over the isolated agent's feasible
    actions; 'neglect' mode ignores beliefs (uniform)."""
    if mode == "neglect":
        return np.ones(len(positions))
    acc = np.zeros(len(positions))
    for na in nas:
        acc += stores[na].prior(pa_agent, t)[positions]
    if acc.sum() <= 0:
        return np.ones(len(positions))
    return acc


def _explore_cell(feas: FeasibleSets, rng) -> tuple:
    return tuple(int(rng.integers(len(lst)))
                 for lst in (feas.dsm_masks, feas.pv_bids, feas.ess_actions))


def run_episode_badrl(env, learners, stores, obs_models, failure, episode,
                      cfg: RunConfig, rngs: RngStreams, stats=None, train=True,
                      eps_override=None, forced_pa=None, pa_mode="belief") -> MetricsRow:
    """One Algorithm-1 day: heartbeat Q exchange, CE (or belief CE) action
    selection, observation harvest, market step, replay, periodic training."""
    T = cfg.grid.t_op
    env.reset(rngs.env)
    for a in AGENTS:
        learners[a].begin_episode()
    eps = epsilon_value(cfg.learner, episode, cfg.episodes) \
        if eps_override is None else eps_override

    records = []
    experiences = {a: [] for a in AGENTS}
    returns = dict.fromkeys(AGENTS, 0.0)
    dsm_cost = 0.0
    prices, imports, exports = [], 0.0, 0.0
    max_eres = 0.0
    max_cres = 0.0
    acc = (0, 0)

    feas = env.feasible()
    for t in range(1, T + 1):
        enc = {a: env.encode(a) for a in AGENTS}
        q = {a: learners[a].step_q(enc[a]) for a in AGENTS}

        pa = set()
        for a in AGENTS:
            rec = comm_mod.broadcast(a, [p for p in AGENTS if p != a],
                                     comm_mod.KIND_Q, t, failure, episode, rngs.comm)
            records.append(rec)
            if not rec.ok:
                pa.add(a)
        if forced_pa and t in forced_pa:
            pa |= set(forced_pa[t])

        if rngs.policy.random() < eps:
            cell = _explore_cell(feas, rngs.policy)
        else:
            tensors = {a: q[a][feas.joint].reshape(feas.shape) for a in AGENTS}
            if not pa:
                dist = solve_full_ce([QSlice(a, tensors[a]) for a in AGENTS])
                cell = sample_joint_action(dist, rngs.policy)
                if stats is not None:
                    stats["full_ce_calls"] = stats.get("full_ce_calls", 0) + 1
            else:
                parts = [0, 0, 0]
                for a in pa:
                    parts[AGENT_AXIS[a]] = greedy_action(tensors[a], AGENT_AXIS[a])
                nas = [a for a in AGENTS if a not in pa]
                if nas:
                    beliefs = {AGENT_AXIS[p]: _mean_peer_belief(
                        stores, nas, p, t, _feasible_positions(p, feas), pa_mode)
                        for p in pa}
                    dist = solve_belief_ce([QSlice(a, tensors[a]) for a in nas], beliefs)
                    sub = sample_joint_action(dist, rngs.policy)
                    for a, pos in zip(nas, sub):
                        parts[AGENT_AXIS[a]] = pos
                    if stats is not None:
                        stats["belief_ce_calls"] = stats.get("belief_ce_calls", 0) + 1
                cell = tuple(parts)

        action = feas.action_from_cell(cell)
        jidx = env.space.encode(action)
        acc = _harvest_observations(stores, obs_models, feas, action, t, rngs.obs, acc)

        rewards, info = env.step(action, rngs.env)
        done = t == T
        next_feas = None if done else env.feasible()
        next_joint = np.empty(0, dtype=np.int64) if done else next_feas.joint
        for a in AGENTS:
            experiences[a].append(Experience(enc[a], jidx, rewards[a],
                                             env.encode(a), done, next_joint))
            returns[a] += rewards[a]
        dsm_cost += info["dsm_kw"] * info["price"]
        prices.append(info["price"])
        imports += info["grid_import"]
        exports += info["grid_export"]
        max_eres = max(max_eres, info["energy_residual"])
        max_cres = max(max_cres, info["cash_residual"])
        feas = next_feas

    loss = float("nan")
    if train:
        for a in AGENTS:
            learners[a].record_episode(experiences[a])
        if (episode + 1) % cfg.learner.train_every == 0:
            loss = float(np.mean([learners[a].train_session(episode, rngs.learn)
                                  for a in AGENTS]))

    hits, total = acc
    return MetricsRow(
        episode=episode,
        reward_dsm=returns[mk.DSM], reward_pv=returns[mk.PV],
        reward_ess=returns[mk.ESS], mg_reward=sum(returns.values()),
        dsm_cost=dsm_cost, mean_price=float(np.mean(prices)),
        grid_import_kwh=imports, grid_export_kwh=exports,
        messages=len(records), failed_transmissions=comm_mod.failed_count(records),
        belief_accuracy=hits / total if total else float("nan"),
        loss=loss, epsilon=eps,
        energy_residual=max_eres, cash_residual=max_cres)


def run_episode_nashdqn(env, learners, failure, episode, cfg: RunConfig,
                        rngs: RngStreams, stats=None, train=True,
                        eps_override=None) -> MetricsRow:
    """One Algorithm-2 day: DQN learners coordinate by synchronous
    best-response rounds; isolated agents are neglected (their action axes
    are averaged out) and act greedily on their own."""
    T = cfg.grid.t_op
    env.reset(rngs.env)
    for a in AGENTS:
        learners[a].begin_episode()
    eps = epsilon_value(cfg.learner, episode, cfg.episodes) \
        if eps_override is None else eps_override

    records = []
    extra_messages = 0
    extra_failures = 0
    experiences = {a: [] for a in AGENTS}
    returns = dict.fromkeys(AGENTS, 0.0)
    dsm_cost = 0.0
    prices, imports, exports = [], 0.0, 0.0
    max_eres = 0.0
    max_cres = 0.0

    feas = env.feasible()
    for t in range(1, T + 1):
        enc = {a: env.encode(a) for a in AGENTS}
        q = {a: learners[a].step_q(enc[a]) for a in AGENTS}

        pa = set()
        for a in AGENTS:
            rec = comm_mod.broadcast(a, [p for p in AGENTS if p != a],
                                     comm_mod.KIND_EQ, t, failure, episode, rngs.comm)
            records.append(rec)
            if not rec.ok:
                pa.add(a)

        if rngs.policy.random() < eps:
            cell = _explore_cell(feas, rngs.policy)
        else:
            tensors = {a: q[a][feas.joint].reshape(feas.shape) for a in AGENTS}
            parts = [0, 0, 0]
            for a in pa:
                parts[AGENT_AXIS[a]] = greedy_action(tensors[a], AGENT_AXIS[a])
            nas = [a for a in AGENTS if a not in pa]
            if len(nas) == 1:
                a = nas[0]
                parts[AGENT_AXIS[a]] = greedy_action(tensors[a], AGENT_AXIS[a])
            elif len(nas) >= 2:
                pa_axes = sorted((AGENT_AXIS[a] for a in pa), reverse=True)
                utilities = []
                for a in nas:
                    u = tensors[a]
                    for axis in pa_axes:
                        u = u.mean(axis=axis)
                    utilities.append(u)
                profile, rounds, _ = nash_iterate(utilities, cfg.nash_max_rounds)
                for a, pos in zip(nas, profile):
                    parts[AGENT_AXIS[a]] = pos
                if rounds > 1:
                    n_msg = (rounds - 1) * len(nas)
                    extra_messages += n_msg
                    extra_failures += comm_mod.bill_messages(n_msg, failure,
                                                             episode, rngs.comm)
                if stats is not None:
                    stats["nash_rounds"] = stats.get("nash_rounds", 0) + rounds
            cell = tuple(parts)

        action = feas.action_from_cell(cell)
        jidx = env.space.encode(action)
        rewards, info = env.step(action, rngs.env)
        done = t == T
        next_feas = None if done else env.feasible()
        next_joint = np.empty(0, dtype=np.int64) if done else next_feas.joint
        for a in AGENTS:
            experiences[a].append(Experience(enc[a], jidx, rewards[a],
                                             env.encode(a), done, next_joint))
            returns[a] += rewards[a]
        dsm_cost += info["dsm_kw"] * info["price"]
        prices.append(info["price"])
        imports += info["grid_import"]
        exports += info["grid_export"]
        max_eres = max(max_eres, info["energy_residual"])
        max_cres = max(max_cres, info["cash_residual"])
        feas = next_feas

    loss = float("nan")
    if train:
        for a in AGENTS:
            learners[a].record_episode(experiences[a])
        if (episode + 1) % cfg.learner.train_every == 0:
            loss = float(np.mean([learners[a].train_session(episode, rngs.learn)
                                  for a in AGENTS]))

    return MetricsRow(
        episode=episode,
        reward_dsm=returns[mk.DSM], reward_pv=returns[mk.PV],
        reward_ess=returns[mk.ESS], mg_reward=sum(returns.values()),
        dsm_cost=dsm_cost, mean_price=float(np.mean(prices)),
        grid_import_kwh=imports, grid_export_kwh=exports,
        messages=len(records) + extra_messages,
        failed_transmissions=comm_mod.failed_count(records) + extra_failures,
        belief_accuracy=float("nan"), loss=loss, epsilon=eps,
        energy_residual=max_eres, cash_residual=max_cres)


def run_episode_admm(env, failure, episode, cfg: RunConfig,
                     rngs: RngStreams, stats=None) -> MetricsRow:
    """One model-based day: slot-wise consensus ADMM dispatch to convergence,
    each iteration billing one dual-variable broadcast per active agent."""
    T = cfg.grid.t_op
    env.reset(rngs.env)

    records = []
    extra_messages = 0
    extra_failures = 0
    returns = dict.fromkeys(AGENTS, 0.0)
    dsm_cost = 0.0
    prices, imports, exports = [], 0.0, 0.0
    max_eres = 0.0
    max_cres = 0.0
    ladder = cfg.market.price_ladder

    for t in range(1, T + 1):
        pa = set()
        for a in AGENTS:
            rec = comm_mod.broadcast(a, [p for p in AGENTS if p != a],
                                     comm_mod.KIND_DUAL, t, failure, episode, rngs.comm)
            records.append(rec)
            if not rec.ok:
                pa.add(a)

        allowed = np.array(gm.dsm_allowed(env.dsm, env.params))
        forced = np.array(gm.dsm_forced(env.dsm, env.params))
        feas_ess = gm.ess_feasible_actions(env.ess, env.params, ladder)
        q_lo = -1.0 if gm.ESS_CHARGE in feas_ess else 0.0
        q_hi = 1.0 if any(a >= gm.ESS_DISCHARGE_BASE for a in feas_ess) else 0.0
        p_hat = ladder[admm_mod.project_bid(env.last_price, ladder, cfg.market.p_grid)]
        ctx = admm_mod.SlotContext(
            p_hat=p_hat, p_grid=cfg.market.p_grid,
            feed_in=cfg.market.feed_in_price, pv_power=env.pv.power,
            device_powers=np.array([d.avg_power for d in env.params.devices]),
            allowed=allowed, forced=forced, q_lo=q_lo, q_hi=q_hi,
            active=np.array([a not in pa for a in AGENTS]))
        action, iters, converged = admm_mod.admm_dispatch(
            ctx, cfg.admm, ladder, charge_power=env.params.ess_charge_power)
        if not converged:
            log.debug("ADMM hit max_iters at episode %d slot %d", episode, t)
        n_msg = iters * int(ctx.active.sum())
        extra_messages += n_msg
        extra_failures += comm_mod.bill_messages(n_msg, failure, episode, rngs.comm)
        if stats is not None:
            stats["admm_iters"] = stats.get("admm_iters", 0) + iters

        rewards, info = env.step(action, rngs.env)
        for a in AGENTS:
            returns[a] += rewards[a]
        dsm_cost += info["dsm_kw"] * info["price"]
        prices.append(info["price"])
        imports += info["grid_import"]
        exports += info["grid_export"]
        max_eres = max(max_eres, info["energy_residual"])
        max_cres = max(max_cres, info["cash_residual"])

    return MetricsRow(
        episode=episode,
        reward_dsm=returns[mk.DSM], reward_pv=returns[mk.PV],
        reward_ess=returns[mk.ESS], mg_reward=sum(returns.values()),
        dsm_cost=dsm_cost, mean_price=float(np.mean(prices)),
        grid_import_kwh=imports, grid_export_kwh=exports,
        messages=len(records) + extra_messages,
        failed_transmissions=comm_mod.failed_count(records) + extra_failures,
        belief_accuracy=float("nan"), loss=float("nan"), epsilon=float("nan"),
        energy_residual=max_eres, cash_residual=max_cres)


def run_seed(cfg: RunConfig, seed: int, stats=None, keep_components=False):
    """All episodes of one seed; returns metrics rows (and live components
    on request, e.g. trained learners for evaluation)."""
    rngs = RngStreams.spawn(seed)
    env = Environment(cfg)
    failure = comm_mod.FailureModel(cfg.comm.p_fail, cfg.comm.fail_start,
                                    cfg.comm.fail_end)
    rows = []
    components = {"env": env, "rngs": rngs, "failure": failure}
    if cfg.algorithm == "ba-drl":
        learners = build_learners(cfg, env, rngs.learn, double=True)
        stores = make_belief_stores(env.space, cfg)
        obs_models = make_observation_models(env.space, cfg.belief.fidelity)
        components.update(learners=learners, stores=stores, obs_models=obs_models)
        for episode in range(cfg.episodes):
            rows.append(run_episode_badrl(env, learners, stores, obs_models,
                                          failure, episode, cfg, rngs, stats))
    elif cfg.algorithm == "nash-dqn":
        learners = build_learners(cfg, env, rngs.learn, double=False)
        components.update(learners=learners)
        for episode in range(cfg.episodes):
            rows.append(run_episode_nashdqn(env, learners, failure, episode,
                                            cfg, rngs, stats))
    elif cfg.algorithm == "admm":
        for episode in range(cfg.episodes):
            rows.append(run_episode_admm(env, failure, episode, cfg, rngs, stats))
    else:
        raise ValueError(f"unknown algorithm {cfg.algorithm}")
    return (rows, components) if keep_components else rows


def write_rows_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.to_csv())


def read_rows_csv(path) -> dict:
    """Columns as float arrays keyed by name."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = list(reader)
    cols = {}
    for i, name in enumerate(header):
        cols[name] = np.array([float(r[i]) for r in data])
    return cols


def _ci95_halfwidth(values: np.ndarray) -> float:
    """Half-width of the t-based 95% confidence interval of the mean."""
    from scipy import stats as sstats

    n = values.shape[0]
    if n < 2:
        return 0.0
    sd = values.std(ddof=1)
    if sd == 0.0:
        return 0.0
    return float(sstats.t.ppf(0.975, n - 1) * sd / np.sqrt(n))


def aggregate_rows(per_seed_rows) -> list[dict]:
    """Per-episode mean and 95% CI half-width across seeds, for every metric."""
    n_episodes = len(per_seed_rows[0])
    out = []
    for e in range(n_episodes):
        entry = {"episode": e}
        for col in CSV_COLUMNS[1:]:
            vals = np.array([float(getattr(rows[e], col)) for rows in per_seed_rows])
            finite = vals[np.isfinite(vals)]
            if finite.size == 0:
                entry[f"{col}_mean"], entry[f"{col}_ci95"] = float("nan"), float("nan")
            else:
                entry[f"{col}_mean"] = float(finite.mean())
                entry[f"{col}_ci95"] = _ci95_halfwidth(finite)
        out.append(entry)
    return out


def write_aggregate_csv(aggregate, path) -> None:
    if not aggregate:
        return
    cols = list(aggregate[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for entry in aggregate:
            writer.writerow([repr(entry[c]) if isinstance(entry[c], float)
                             else str(entry[c]) for c in cols])


def plot_aggregate(aggregate, algo: str, out_dir) -> list:
    """Static SVG plots from an aggregate table."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    episodes = np.array([e["episode"] for e in aggregate])
    made = []

    def curve(ax, col, label):
        mean = np.array([e[f"{col}_mean"] for e in aggregate])
        ci = np.array([e[f"{col}_ci95"] for e in aggregate])
        ax.plot(episodes, mean, label=label, linewidth=0.9)
        ax.fill_between(episodes, mean - ci, mean + ci, alpha=0.2)

    fig, ax = plt.subplots(figsize=(7, 4))
    for col, label in (("reward_dsm", "DSM"), ("reward_pv", "PV"),
                       ("reward_ess", "ESS"), ("mg_reward", "MG total")):
        curve(ax, col, label)
    ax.set_xlabel("episode")
    ax.set_ylabel("reward ($/day)")
    ax.legend()
    ax.set_title(f"{algo}: rewards (mean and 95% CI)")
    path = os.path.join(out_dir, f"{algo}_rewards.svg")
    fig.savefig(path)
    plt.close(fig)
    made.append(path)

    for col, fname, ylabel in (("dsm_cost", "dsm_cost", "DSM daily cost ($)"),
                               ("failed_transmissions", "failures",
                                "failed transmissions")):
        fig, ax = plt.subplots(figsize=(7, 4))
        curve(ax, col, col)
        ax.set_xlabel("episode")
        ax.set_ylabel(ylabel)
        ax.set_title(f"{algo}: {col}")
        path = os.path.join(out_dir, f"{algo}_{fname}.svg")
        fig.savefig(path)
        plt.close(fig)
        made.append(path)
    return made


def run_experiment(cfg: RunConfig, make_plots: bool = True) -> dict:
    """Run every seed, write per-seed CSVs, the aggregate and the plots."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    per_seed = []
    paths = {"seeds": []}
    for seed in cfg.seeds:
        rows = run_seed(cfg, seed)
        path = os.path.join(cfg.out_dir, f"{cfg.algorithm}_seed{seed}.csv")
        write_rows_csv(rows, path)
        paths["seeds"].append(path)
        per_seed.append(rows)
        log.info("seed %d done (%d episodes)", seed, len(rows))

    aggregate = aggregate_rows(per_seed)
    agg_path = os.path.join(cfg.out_dir, f"{cfg.algorithm}_aggregate.csv")
    write_aggregate_csv(aggregate, agg_path)
    paths["aggregate"] = agg_path

    meta = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "episodes": cfg.episodes,
        "seeds": list(cfg.seeds),
        "columns": list(CSV_COLUMNS),
    }
    meta_path = os.path.join(cfg.out_dir, f"{cfg.algorithm}_metadata.json")
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    paths["metadata"] = meta_path

    if make_plots:
        paths["plots"] = plot_aggregate(aggregate, cfg.algorithm, cfg.out_dir)
    return paths


def sweep_experiment(cfg: RunConfig, param: str, values, make_plots: bool = True) -> dict:
    """Re-run the experiment over a parameter grid (e.g. p_fail) and report
    the trend of the mean MG reward across the grid."""
    if param != "p_fail":
        raise ValueError("only the p_fail sweep is supported")
    base_out = cfg.out_dir
    os.makedirs(base_out, exist_ok=True)
    summary = []
    for v in values:
        sub = dataclasses.replace(
            cfg, comm=dataclasses.replace(cfg.comm, p_fail=float(v)),
            out_dir=os.path.join(base_out, f"sweep_{param}_{v}"))
        run_experiment(sub, make_plots=make_plots)
        rows = [read_rows_csv(os.path.join(sub.out_dir,
                                           f"{cfg.algorithm}_seed{s}.csv"))
                for s in cfg.seeds]
        window = max(1, cfg.episodes // 5)
        mg = np.array([r["mg_reward"][-window:].mean() for r in rows])
        summary.append({"p_fail": float(v), "mg_reward_mean": float(mg.mean()),
                        "mg_reward_ci95": _ci95_halfwidth(mg)})
    path = os.path.join(base_out, "sweep_summary.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p_fail", "mg_reward_mean", "mg_reward_ci95"])
        for s in summary:
            writer.writerow([repr(s["p_fail"]), repr(s["mg_reward_mean"]),
                             repr(s["mg_reward_ci95"])])
    means = [s["mg_reward_mean"] for s in summary]
    monotone = all(means[i] >= means[i + 1] for i in range(len(means) - 1))
    report = os.path.join(base_out, "sweep_report.txt")
    with open(report, "w") as fh:
        fh.write(f"sweep over {param}: values {list(values)}\n")
        fh.write(f"mean MG reward: {means}\n")
        fh.write(f"monotone non-increasing in {param}: {monotone}\n")
    return {"summary": path, "report": report}


CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: RunConfig, learners: dict, episode: int,
                    rngs: RngStreams) -> None:
    """Versioned .npz blob: per-agent main/target weights, hyperparameters,
    and the state of every RNG stream.

    Key layout: ``version``, ``algorithm``, ``episode``, ``hyperparams``
    (JSON), ``<agent>/<main|target>/<array>`` for the seven weight arrays of
    each network, and ``rng/<stream>`` (JSON bit-generator state).
    """
    blobs = {
        "version": np.array(CHECKPOINT_VERSION),
        "algorithm": np.array(cfg.algorithm),
        "episode": np.array(episode),
        "hyperparams": np.array(json.dumps(dataclasses.asdict(cfg.learner))),
    }
    for a, lrn in learners.items():
        for tag, params in (("main", lrn.net.params), ("target", lrn.target_net.params)):
            for name, arr in params.arrays().items():
                blobs[f"{a}/{tag}/{name}"] = arr
    for name in RngStreams.NAMES:
        state = getattr(rngs, name).bit_generator.state
        blobs[f"rng/{name}"] = np.array(json.dumps(state))
    np.savez_compressed(path, **blobs)


def load_checkpoint(path):
    """Rebuild learners and RNG streams from a checkpoint blob."""
    from .learner import Hyperparams, LstmNetwork, LstmParams

    data = np.load(path)
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['version']}")
    algorithm = str(data["algorithm"])
    episode = int(data["episode"])
    h = Hyperparams(**json.loads(str(data["hyperparams"])))

    learners = {}
    for a in AGENTS:
        nets = {}
        for tag in ("main", "target"):
            arrays = {name: data[f"{a}/{tag}/{name}"]
                      for name in ("w_in", "b_in", "W", "U", "b", "w_out", "b_out")}
            nets[tag] = LstmParams(**arrays)
        lrn = AgentLearner.__new__(AgentLearner)
        lrn.agent_id = a
        lrn.h = h
        lrn.double = algorithm == "ba-drl"
        lrn.net = LstmNetwork(nets["main"])
        lrn.target_net = LstmNetwork(nets["target"])
        from .learner import ReplayBuffer
        lrn.buffer = ReplayBuffer(h.buffer_capacity, nets["main"].n_out)
        lrn.train_sessions = 0
        lrn.last_loss = float("nan")
        learners[a] = lrn

    rngs = RngStreams.spawn(0)
    for name in RngStreams.NAMES:
        getattr(rngs, name).bit_generator.state = json.loads(str(data[f"rng/{name}"]))
    return {"algorithm": algorithm, "episode": episode, "hyperparams": h,
            "learners": learners, "rngs": rngs}


def evaluate_checkpoint(cfg: RunConfig, checkpoint: dict, n_episodes: int,
                        stats=None) -> list[MetricsRow]:
    """Greedy (epsilon = 0) evaluation episodes with the restored weights."""
    env = Environment(cfg)
    rngs = checkpoint["rngs"]
    failure = comm_mod.FailureModel(cfg.comm.p_fail, cfg.comm.fail_start,
                                    cfg.comm.fail_end)
    learners = checkpoint["learners"]
    rows = []
    if checkpoint["algorithm"] == "ba-drl":
        stores = make_belief_stores(env.space, cfg)
        obs_models = make_observation_models(env.space, cfg.belief.fidelity)
        for episode in range(n_episodes):
            rows.append(run_episode_badrl(env, learners, stores, obs_models,
                                          failure, episode, cfg, rngs, stats,
                                          train=False, eps_override=0.0))
    else:
        for episode in range(n_episodes):
            rows.append(run_episode_nashdqn(env, learners, failure, episode,
                                            cfg, rngs, stats,
                                            train=False, eps_override=0.0))
    return rows


def evaluate_forced_isolation(cfg: RunConfig, components, n_episodes: int,
                              slot: int, seed: int) -> dict:
    """Mean clearing price at the forced-isolation slot under belief-CE vs
    neglect handling of the isolated ESS agent, with paired randomness."""
    results = {}
    for mode in ("belief", "neglect"):
        rngs = RngStreams.spawn(seed)
        prices = []
        env = components["env"]
        for _ in range(n_episodes):
            row_prices = []
            env.reset(rngs.env)
            for a in AGENTS:
                components["learners"][a].begin_episode()
            feas = env.feasible()
            for t in range(1, cfg.grid.t_op + 1):
                enc = {a: env.encode(a) for a in AGENTS}
                q = {a: components["learners"][a].step_q(enc[a]) for a in AGENTS}
                tensors = {a: q[a][feas.joint].reshape(feas.shape) for a in AGENTS}
                if t == slot:
                    parts = [0, 0, 0]
                    parts[AGENT_AXIS[mk.ESS]] = greedy_action(
                        tensors[mk.ESS], AGENT_AXIS[mk.ESS])
                    nas = [mk.DSM, mk.PV]
                    beliefs = {AGENT_AXIS[mk.ESS]: _mean_peer_belief(
                        components["stores"], nas, mk.ESS, t,
                        _feasible_positions(mk.ESS, feas), mode)}
                    dist = solve_belief_ce([QSlice(a, tensors[a]) for a in nas],
                                           beliefs)
                    sub = sample_joint_action(dist, rngs.policy)
                    for a, pos in zip(nas, sub):
                        parts[AGENT_AXIS[a]] = pos
                    cell = tuple(parts)
                else:
                    dist = solve_full_ce([QSlice(a, tensors[a]) for a in AGENTS])
                    cell = sample_joint_action(dist, rngs.policy)
                action = feas.action_from_cell(cell)
                rewards, info = env.step(action, rngs.env)
                row_prices.append(info["price"])
                feas = None if t == cfg.grid.t_op else env.feasible()
            prices.append(row_prices[slot - 1])
        results[mode] = float(np.mean(prices))
    return results
