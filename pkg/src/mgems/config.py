"""Run configuration: embedded defaults, overridable from a flat config file.

The file format is INI-style key = value pairs with one section per module
(run, grid, devices, market, belief, learner, comm, admm).  Every default
can be overridden; unknown keys raise.  ``write_default_config`` emits a
fully populated template.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .admm import AdmmConfig
from .grid_model import PRICE_LADDER, DeviceSet, GridParams, default_devices
from .learner import Hyperparams
from .market import PvCost

ALGORITHMS = ("ba-drl", "nash-dqn", "admm")


@dataclass(frozen=True)
class MarketConfig:
    p_grid: float = 0.16
    feed_in_frac: float = 0.4
    price_ladder: tuple = PRICE_LADDER
    pv_cost_beta: float = 0.001
    pv_cost_zeta: float = 0.02
    pv_cost_phi: float = 0.1

    @property
    def pv_cost(self) -> PvCost:
        return PvCost(self.pv_cost_beta, self.pv_cost_zeta, self.pv_cost_phi)

    @property
    def feed_in_price(self) -> float:
        return self.feed_in_frac * self.p_grid


@dataclass(frozen=True)
class BeliefConfig:
    fidelity: float = 0.6
    per_hour: bool = True
    init_count: float = 1.0


@dataclass(frozen=True)
class CommConfig:
    p_fail: float = 0.01
    fail_start: int = 1500   # desk-scale default: failures in the back half
    fail_end: int = -1       # exclusive episode bound; -1 runs to the end


@dataclass
class RunConfig:
    algorithm: str = "ba-drl"
    episodes: int = 3000
    seeds: tuple = (0,)
    out_dir: str = "runs"
    nash_max_rounds: int = 10
    grid: GridParams = field(default_factory=lambda: GridParams(devices=default_devices()))
    market: MarketConfig = field(default_factory=MarketConfig)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    learner: Hyperparams = field(default_factory=Hyperparams)
    comm: CommConfig = field(default_factory=CommConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.episodes <= 0:
            raise ValueError("episodes must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")


def full_scale(cfg: RunConfig) -> RunConfig:
    """The paper-scale schedule: 10000 episodes, failures from episode 5000."""
    return dataclasses.replace(
        cfg, episodes=10000,
        comm=dataclasses.replace(cfg.comm, fail_start=5000, fail_end=-1))


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [s for s in (p.strip() for p in raw.split(",")) if s]
        elem = like[0] if like else 0
        return tuple(_coerce(s, elem) for s in items)
    return raw.strip()


def _override(obj, section: configparser.SectionProxy, skip=()):
    values = {}
    fields = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    for key in section:
        if key in skip:
            continue
        if key not in fields:
            raise KeyError(f"unknown config key [{type(obj).__name__}] {key}")
        values[key] = _coerce(section[key], fields[key])
    return dataclasses.replace(obj, **values) if values else obj


def _parse_devices(section: configparser.SectionProxy) -> tuple:
    devices = []
    for key in sorted(section, key=lambda k: int(k.rsplit("_", 1)[1])):
        if not key.startswith("device_"):
            raise KeyError(f"unexpected key in [devices]: {key}")
        parts = [p.strip() for p in section[key].split(",")]
        if len(parts) != 4:
            raise ValueError(f"{key}: expected power,start,end,duration")
        devices.append(DeviceSet(id=int(key.rsplit("_", 1)[1]),
                                 avg_power=float(parts[0]),
                                 window_start=int(parts[1]),
                                 window_end=int(parts[2]),
                                 duration=int(parts[3])))
    return tuple(devices)


def load_config(path=None) -> RunConfig:
    """Defaults, then file overrides if a path is given."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)

    devices = cfg.grid.devices
    if parser.has_section("devices"):
        devices = _parse_devices(parser["devices"])
    grid = dataclasses.replace(cfg.grid, devices=devices)
    if parser.has_section("grid"):
        grid = _override(grid, parser["grid"], skip=("devices",))

    sections = {
        "market": cfg.market, "belief": cfg.belief, "learner": cfg.learner,
        "comm": cfg.comm, "admm": cfg.admm,
    }
    updated = {name: (_override(obj, parser[name]) if parser.has_section(name) else obj)
               for name, obj in sections.items()}

    run = cfg
    if parser.has_section("run"):
        run = _override(cfg, parser["run"],
                        skip=("grid", "market", "belief", "learner", "comm", "admm"))
    return dataclasses.replace(run, grid=grid, **updated)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def write_default_config(path, cfg: RunConfig | None = None) -> None:
    cfg = cfg or RunConfig()
    parser = configparser.ConfigParser()
    parser["run"] = {k: _format_value(getattr(cfg, k))
                     for k in ("algorithm", "episodes", "seeds", "out_dir",
                               "nash_max_rounds")}
    parser["grid"] = {f.name: _format_value(getattr(cfg.grid, f.name))
                      for f in dataclasses.fields(cfg.grid) if f.name != "devices"}
    parser["devices"] = {
        f"device_{d.id}": f"{_format_value(d.avg_power)}, {d.window_start}, "
                          f"{d.window_end}, {d.duration}"
        for d in cfg.grid.devices}
    for name in ("market", "belief", "learner", "comm", "admm"):
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(obj, f.name))
                        for f in dataclasses.fields(obj)}
    with open(path, "w") as fh:
        parser.write(fh)
