"""Scenario orchestration: traffic -> per-EV energy -> market -> dispatch.

One *round* is one market hour. Its randomness comes from a single seed that
is split into independent child streams for traffic, battery state,
renewables and the game, so changing one subsystem never shifts another's
draws.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .bounds import SOCDistribution, supply_demand_upper_bounds
from .ev_model import (
    PRESETS,
    EnergyOptions,
    Environment,
    EVClass,
    EVSpec,
    SOCState,
    VelocityTrace,
    energy_position,
    route_energy,
)
from .game import Action, ActionProfile, GameConfig, Player, participation_mask
from .mobility import (
    CLASSES,
    ForecasterKind,
    ForecastMethod,
    RoadConfig,
    forecast_route_velocities,
    normalize_class_probs,
    run,
    spawn_traffic,
    time_series_to_trace,
)
from .optimizer import (
    DispatchSolution,
    GridParams,
    InfeasibleError,
    MarketSnapshot,
    SolveStatus,
    SupplyOffer,
    branch_and_bound_solve,
    ev_utility,
    feasible_supply_interval,
    grid_cost,
    offer_bounds,
    utility_maximizer,
    verify_net_zero,
)
from .renewables import HourStamp, RenewableFleet, aggregate_renewables


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the offending field."""


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class SOCSettings:
    min_frac: float = 0.2
    max_frac: float = 0.8
    alpha: float = 0.2
    current_median_frac: float = 0.5
    current_sigma_log: float = 0.4

    def __post_init__(self):
        if not 0 <= self.min_frac < self.max_frac <= 1:
            raise ValueError("need 0 <= min_frac < max_frac <= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.current_median_frac <= 1:
            raise ValueError("current_median_frac must be in (0, 1]")
        if not self.current_sigma_log >= 0:
            raise ValueError("current_sigma_log must be >= 0")


@dataclass(frozen=True)
class RouteSettings:
    route_median_m: float = 10_000.0
    trip_median_m: float = 6_000.0
    sigma_log: float = 1.0

    def __post_init__(self):
        if not (self.route_median_m > 0 and self.trip_median_m > 0 and self.sigma_log >= 0):
            raise ValueError("route medians must be > 0 and sigma_log >= 0")


@dataclass(frozen=True)
class GameSettings:
    road_charge: float = 150.0
    n_threshold: int = 10
    tournament_rounds: int = 50

    def __post_init__(self):
        if not self.road_charge >= 0:
            raise ValueError("road_charge must be >= 0")
        if int(self.n_threshold) != self.n_threshold or self.n_threshold < 1:
            raise ValueError("n_threshold must be an integer >= 1")
        if self.tournament_rounds < 1:
            raise ValueError("tournament_rounds must be >= 1")


# Published per-class medians (Wh) of the remaining charge, with one log-scale spread.
TABLE_SOC_MEDIAN_WH = {EVClass.CAR: 5_000.0, EVClass.BUS: 50_000.0, EVClass.LORRY: 10_000.0}
TABLE_SOC_SIGMA = 0.1


@dataclass(frozen=True)
class BoundSettings:
    """Where the bound formulas get their charge distribution.

    ``soc_source="table"`` uses the published per-class medians and spread;
    ``"pilot"`` fits each class to a pilot sample of this config's own fleet.
    """

    soc_source: str = "table"
    pilot_samples: int = 40_000
    literal_demand_tail: bool = False

    def __post_init__(self):
        if self.soc_source not in ("table", "pilot"):
            raise ValueError("soc_source must be 'table' or 'pilot'")
        if self.pilot_samples < 100:
            raise ValueError("pilot_samples must be >= 100")


@dataclass(frozen=True)
class SweepAxes:
    p_EV: tuple = ()
    m_G: tuple = ()
    s_G_cap: tuple = ()
    n_ev: tuple = ()

    def __post_init__(self):
        for f in fields(self):
            values = tuple(getattr(self, f.name))
            if not values:
                raise ValueError(f"sweep axis {f.name} must be non-empty")
            if any(not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0) for v in values):
                raise ValueError(f"sweep axis {f.name} must hold finite non-negative numbers")
            object.__setattr__(self, f.name, values)
        object.__setattr__(self, "n_ev", tuple(int(v) for v in self.n_ev))

    def cells(self):
        return list(itertools.product(self.p_EV, self.m_G, self.s_G_cap, self.n_ev))


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadConfig = field(default_factory=lambda: RoadConfig(dawdle=0.5))
    fleet: RenewableFleet = field(default_factory=RenewableFleet)
    grid: GridParams = field(default_factory=GridParams)
    soc: SOCSettings = field(default_factory=SOCSettings)
    ev_specs: dict = field(default_factory=lambda: dict(PRESETS))
    class_weights: tuple = (0.6, 0.4, 0.4)
    route: RouteSettings = field(default_factory=RouteSettings)
    environment: Environment = field(default_factory=Environment)
    energy: EnergyOptions = field(default_factory=EnergyOptions)
    n_ev: int = 500
    forecaster: ForecasterKind = field(default_factory=ForecasterKind)
    seg_len_m: float = 100.0
    warmup_s: int = 120
    horizon_s: int = 3600
    hour: HourStamp = field(default_factory=lambda: HourStamp(6, 12))
    game: GameSettings = field(default_factory=GameSettings)
    bounds: BoundSettings = field(default_factory=BoundSettings)
    rounds: int = 100
    sweep: SweepAxes | None = None
    rng_seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if int(self.n_ev) != self.n_ev or self.n_ev < 0:
            raise ConfigError("n_ev: must be an integer >= 0")
        if not self.seg_len_m > 0:
            raise ConfigError("seg_len_m: must be > 0")
        if self.warmup_s < 1 or self.horizon_s < 1:
            raise ConfigError("warmup_s/horizon_s: must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds: must be >= 1")
        if int(self.rng_seed) != self.rng_seed or self.rng_seed < 0:
            raise ConfigError("rng_seed: must be a non-negative integer")
        try:
            normalize_class_probs(self.class_weights)
        except ValueError as exc:
            raise ConfigError(f"class_weights: {exc}") from None
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        specs = {EVClass(k): v for k, v in self.ev_specs.items()}
        if set(specs) != set(CLASSES):
            raise ConfigError("ev_specs: must define car, bus and lorry")
        object.__setattr__(self, "ev_specs", specs)
        if self.sweep is None:
            object.__setattr__(self, "sweep", SweepAxes((self.grid.p_EV,), (self.grid.m_G,),
                                                        (self.grid.s_G_cap,), (self.n_ev,)))

    @property
    def class_probs(self) -> np.ndarray:
        return normalize_class_probs(self.class_weights)

    def spec(self, index: int) -> EVSpec:
        return self.ev_specs[CLASSES[index]]


_SECTIONS = {
    "road": RoadConfig, "fleet": RenewableFleet, "grid": GridParams, "soc": SOCSettings,
    "route": RouteSettings, "environment": Environment, "energy": EnergyOptions,
    "forecaster": ForecasterKind, "hour": HourStamp, "game": GameSettings,
    "bounds": BoundSettings, "sweep": SweepAxes,
}
_SCALARS = {"n_ev": int, "seg_len_m": float, "warmup_s": int, "horizon_s": int, "rounds": int,
            "rng_seed": int, "output_dir": str}


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    kwargs = dict(data)
    if cls is RoadConfig:
        defaults = ScenarioConfig().road
        kwargs.setdefault("dawdle", defaults.dawdle)
        if "station_positions_m" in kwargs:
            kwargs["station_positions_m"] = tuple(kwargs["station_positions_m"])
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _build_specs(data: Any) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("ev_specs: expected an object")
    specs = dict(PRESETS)
    for key, overrides in data.items():
        try:
            cls = EVClass(key)
        except ValueError:
            raise ConfigError(f"ev_specs.{key}: unknown vehicle class") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"ev_specs.{key}: expected an object")
        overrides = {k: v for k, v in overrides.items() if k != "ev_class"}
        known = {f.name for f in fields(EVSpec)}
        for field_name in overrides:
            if field_name not in known:
                raise ConfigError(f"ev_specs.{key}.{field_name}: unknown field")
        try:
            specs[cls] = replace(specs[cls], **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"ev_specs.{key}: {exc}") from None
    return specs


def config_from_dict(data: dict) -> ScenarioConfig:
    """Validated config; absent fields take the published defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key in _SCALARS:
            caster = _SCALARS[key]
            if isinstance(value, bool) or (caster is not str and not isinstance(value, (int, float))):
                raise ConfigError(f"{key}: expected a number")
            if caster is int and value != int(value):
                raise ConfigError(f"{key}: expected an integer")
            kwargs[key] = caster(value)
        elif key == "ev_specs":
            kwargs[key] = _build_specs(value)
        elif key == "class_weights":
            if not isinstance(value, list):
                raise ConfigError("class_weights: expected a list of three numbers")
            kwargs[key] = tuple(value)
        else:
            raise ConfigError(f"{key}: unknown field")
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path: str | Path | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    text = Path(path).read_text()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return config_from_dict(data)


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(_plain(k)): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config: ScenarioConfig) -> dict:
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "ev_specs":
            value = {c.value: {k: v for k, v in asdict(s).items() if k != "ev_class"}
                     for c, s in value.items()}
        elif hasattr(value, "__dataclass_fields__"):
            value = {g.name: getattr(value, g.name) for g in fields(value)}
        out[f.name] = _plain(value)
    return out


def config_hash(config: ScenarioConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- seeds

@dataclass(frozen=True)
class SeedStreams:
    traffic: np.random.SeedSequence
    battery: np.random.SeedSequence
    renewables: np.random.SeedSequence
    game: np.random.SeedSequence

    @classmethod
    def split(cls, seed: int) -> "SeedStreams":
        return cls(*np.random.SeedSequence(int(seed)).spawn(4))


def repetition_seed(root: int, repetition: int) -> int:
    """Seed of the ``repetition``-th round of a sweep cell (shared across cells)."""
    return int(np.random.SeedSequence([int(root), int(repetition)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------- fleet state

@dataclass
class FleetState:
    """Every EV's energy position before the market opens."""

    seed: int
    classes: np.ndarray
    soc_current: np.ndarray
    energy_Wh: np.ndarray
    demand_Wh: np.ndarray
    supply_Wh: np.ndarray
    remaining_Wh: np.ndarray
    trip_m: np.ndarray
    route_m: np.ndarray
    battery_infeasible: np.ndarray
    mean_speed_m_s: float

    @property
    def n(self) -> int:
        return int(self.classes.size)


def draw_soc(config: ScenarioConfig, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cap = np.array([config.spec(int(c)).battery_capacity_Wh for c in range(3)])[classes]
    s = config.soc
    if s.current_sigma_log == 0:
        return cap * s.current_median_frac
    draw = rng.lognormal(np.log(s.current_median_frac * cap), s.current_sigma_log)
    return np.clip(draw, 0.0, cap)


def simulate_fleet(config: ScenarioConfig, seed: int, n_ev: int | None = None,
                   keep_world: bool = False):
    """Run traffic and the energy model for one round.

    Returns the :class:`FleetState`, plus the traffic world when
    ``keep_world`` is set.
    """
    n_ev = config.n_ev if n_ev is None else int(n_ev)
    streams = SeedStreams.split(seed)
    road = config.road
    world = spawn_traffic(road, n_ev, config.class_probs, config.route.route_median_m,
                          config.route.trip_median_m, config.route.sigma_log,
                          np.random.default_rng(streams.traffic))
    run(world, config.warmup_s)
    routes = world.route_lengths.copy()
    trips = world.supply_trips.copy()
    run(world, config.horizon_s)
    velocities = world.velocity_matrix()
    history, future = velocities[:config.warmup_s], velocities[config.warmup_s:]
    limits = road.limits_array()
    energy = np.zeros(n_ev)
    for i in range(n_ev):
        spec = config.spec(int(world.classes[i]))
        limit = limits[world.classes[i]]
        actual = time_series_to_trace(future[:, i], 1.0, config.seg_len_m,
                                      initial_velocity=float(history[-1, i]))
        kind = config.forecaster
        if actual is None and kind.method is ForecastMethod.ORACLE:
            kind = ForecasterKind.speed_limit()
        trace = forecast_route_velocities(kind, history[:, i], float(routes[i]), config.seg_len_m,
                                          float(limit), future=actual)
        energy[i] = route_energy(spec, config.environment, trace, config.energy)
    rng = np.random.default_rng(streams.battery)
    current = draw_soc(config, world.classes, rng)
    demand, supply, remaining = np.zeros(n_ev), np.zeros(n_ev), np.zeros(n_ev)
    infeasible = np.zeros(n_ev, dtype=bool)
    for i in range(n_ev):
        spec = config.spec(int(world.classes[i]))
        soc = SOCState.for_spec(spec, float(current[i]), config.soc.min_frac, config.soc.max_frac,
                                config.soc.alpha)
        pos = energy_position(soc, float(energy[i]))
        demand[i], supply[i], remaining[i] = pos.demand_Wh, pos.supply_Wh, pos.remaining_Wh
        infeasible[i] = pos.battery_infeasible
    mean_speed = float(future.mean()) if future.size else 0.0
    state = FleetState(int(seed), world.classes.copy(), current, energy, demand, supply, remaining,
                       trips, routes, infeasible, mean_speed)
    return (state, world) if keep_world else state


# ---------------------------------------------------------------- market round

MESSAGE_OVERHEAD = 1  # the grid's broadcast of the dispatch result


@dataclass
class MarketBuild:
    snapshot: MarketSnapshot
    holder_ids: np.ndarray  # EVs with surplus
    holder_utility: np.ndarray  # best-case utility of each holder
    offering_ids: np.ndarray  # holders that pass the incentive filter
    wind_Wh: float
    pv_Wh: float


def build_market(config: ScenarioConfig, state: FleetState, grid: GridParams,
                 hour: HourStamp | None = None) -> MarketBuild:
    hour = hour or config.hour
    holders = np.flatnonzero(state.supply_Wh > 0)
    offers, utilities = [], []
    for i in holders:
        spec = config.spec(int(state.classes[i]))
        offer = SupplyOffer(int(i), float(state.supply_Wh[i]), float(state.trip_m[i]),
                            spec.per_unit_consumption)
        offers.append(offer)
        utilities.append(ev_utility(grid, offer, utility_maximizer(grid, offer)))
    utilities = np.array(utilities)
    mask = participation_mask(utilities, config.game.road_charge) if holders.size else np.zeros(0, bool)
    offering = holders[mask]
    viable = [o for o, m in zip(offers, mask) if m and feasible_supply_interval(grid, o) is not None]
    streams = SeedStreams.split(state.seed)
    fleet_seed = int(streams.renewables.generate_state(1)[0])
    wind, pv = aggregate_renewables(replace(config.fleet, rng_seed=fleet_seed), hour)
    snapshot = MarketSnapshot(tuple(viable), float(state.demand_Wh.sum()), wind + pv, grid)
    return MarketBuild(snapshot, holders, utilities, offering, wind, pv)


@dataclass
class RoundReport:
    seed: int
    n_ev: int
    p_EV: float
    m_G: float
    s_G_cap: float
    n_demanders: int
    n_surplus_holders: int
    n_offering: int
    n_viable: int
    total_demand_Wh: float
    total_surplus_Wh: float
    offered_Wh: float
    feasible_surplus_Wh: float
    wind_Wh: float
    pv_Wh: float
    solution: DispatchSolution
    accepted_Wh: float
    accepted_fraction: float
    demand_coverage: float
    grid_only_cost: float
    grid_only_s_G_Wh: float
    no_opt_s_G_Wh: float
    no_opt_cost: float
    net_zero_residual_Wh: float
    message_count: int
    game_n_coop: int
    game_mean_payoff: float
    class_supply_Wh: tuple
    class_demand_Wh: tuple
    mean_speed_m_s: float

    def row(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("solution", "class_supply_Wh", "class_demand_Wh")}
        out["status"] = self.solution.status.value
        out["s_G_Wh"] = self.solution.s_G_Wh
        out["cost_C_G"] = self.solution.cost_C_G
        out["nodes_expanded"] = self.solution.nodes_expanded
        for c, s, d in zip(CLASSES, self.class_supply_Wh, self.class_demand_Wh):
            out[f"supply_{c.value}_Wh"] = s
            out[f"demand_{c.value}_Wh"] = d
        return out

    def to_dict(self) -> dict:
        out = self.row()
        out["solution"] = self.solution.to_dict()
        return out


def _game_round(config: ScenarioConfig, build: MarketBuild, solution: DispatchSolution):
    """One round of the incentive game among surplus holders.

    Cooperators are the holders that offered; their utility is evaluated at
    the volume the grid actually accepted.
    """
    if build.holder_ids.size == 0:
        return 0, math.nan
    offering = set(int(i) for i in build.offering_ids)
    offers = {o.ev_id: o for o in build.snapshot.offers}
    grid = build.snapshot.grid
    players, actions = [], []
    for i, u_best in zip(build.holder_ids, build.holder_utility):
        i = int(i)
        accepted = solution.accepted.get(i, 0.0)
        if i in offers:
            u = ev_utility(grid, offers[i], min(accepted, offers[i].offered_Wh))
        else:
            u = float(u_best)
        players.append(Player(u, True))
        actions.append(Action.COOP if i in offering else Action.NONCOOP)
    game = GameConfig(config.game.road_charge, config.game.n_threshold, tuple(players))
    profile = ActionProfile(tuple(actions))
    return profile.n_coop, float(np.mean(round_payoffs(game, profile)))


def round_payoffs(game: GameConfig, profile: ActionProfile) -> list[float]:
    """Every player's payoff; same values as :func:`payoff`, in one pass."""
    profile.validate(game)
    n_coop = profile.n_coop
    rc = game.road_charge
    if n_coop >= game.n_threshold:
        return [-rc / n_coop] * game.n_players
    return [p.utility_if_coop if a is Action.COOP else -rc
            for p, a in zip(game.players, profile.actions)]


def solve_round(config: ScenarioConfig, state: FleetState, grid: GridParams,
                hour: HourStamp | None = None) -> RoundReport:
    build = build_market(config, state, grid, hour)
    snapshot = build.snapshot
    solution = branch_and_bound_solve(snapshot)
    if solution.status is not SolveStatus.OPTIMAL:
        raise InfeasibleError(f"round with seed {state.seed} has no feasible dispatch", snapshot)
    grid_only = branch_and_bound_solve(snapshot.without_offers())
    _, hi = offer_bounds(snapshot)
    feasible_surplus = float(hi.sum())
    accepted = solution.accepted_total_Wh
    n_dem = int(np.sum(state.demand_Wh > 0))
    n_coop, mean_pay = _game_round(config, build, solution)
    class_supply = tuple(float(state.supply_Wh[state.classes == c].sum()) for c in range(3))
    class_demand = tuple(float(state.demand_Wh[state.classes == c].sum()) for c in range(3))
    return RoundReport(
        seed=state.seed, n_ev=state.n, p_EV=grid.p_EV, m_G=grid.m_G, s_G_cap=grid.s_G_cap,
        n_demanders=n_dem, n_surplus_holders=int(build.holder_ids.size),
        n_offering=int(build.offering_ids.size), n_viable=len(snapshot.offers),
        total_demand_Wh=snapshot.total_demand_Wh, total_surplus_Wh=float(state.supply_Wh.sum()),
        offered_Wh=float(sum(o.offered_Wh for o in snapshot.offers)),
        feasible_surplus_Wh=feasible_surplus, wind_Wh=build.wind_Wh, pv_Wh=build.pv_Wh,
        solution=solution, accepted_Wh=accepted,
        # min() absorbs summation rounding when everything is accepted
        accepted_fraction=min(accepted / feasible_surplus, 1.0) if feasible_surplus > 0 else math.nan,
        demand_coverage=accepted / snapshot.total_demand_Wh if snapshot.total_demand_Wh > 0 else math.nan,
        grid_only_cost=grid_only.cost_C_G, grid_only_s_G_Wh=grid_only.s_G_Wh,
        no_opt_s_G_Wh=grid.s_G_cap, no_opt_cost=grid_cost(grid, grid.s_G_cap, 0.0),
        net_zero_residual_Wh=verify_net_zero(snapshot, solution),
        message_count=n_dem + int(build.offering_ids.size) + MESSAGE_OVERHEAD,
        game_n_coop=n_coop, game_mean_payoff=mean_pay,
        class_supply_Wh=class_supply, class_demand_Wh=class_demand,
        mean_speed_m_s=state.mean_speed_m_s,
    )


def run_round(config: ScenarioConfig, hour: HourStamp | None = None, seed: int | None = None,
              grid: GridParams | None = None) -> RoundReport:
    """Simulate one market hour end to end."""
    seed = config.rng_seed if seed is None else seed
    state = simulate_fleet(config, seed)
    return solve_round(config, state, grid or config.grid, hour)


# ---------------------------------------------------------------- sweep

@dataclass
class CellResult:
    p_EV: float
    m_G: float
    s_G_cap: float
    n_ev: int
    reports: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"pEV{self.p_EV:g}_mG{self.m_G:g}_cap{self.s_G_cap:g}_n{self.n_ev}"

    def mean(self, name: str) -> float:
        values = [getattr(r, name) if hasattr(r, name) else r.row()[name] for r in self.reports]
        values = [v for v in values if v is not None and not math.isnan(v)]
        return float(np.mean(values)) if values else math.nan

    def summary(self) -> dict:
        return {
            "p_EV": self.p_EV, "m_G": self.m_G, "s_G_cap": self.s_G_cap, "n_ev": self.n_ev,
            "rounds": len(self.reports), "failures": len(self.failures),
            "mean_cost_C_G": self.mean("cost_C_G"), "mean_s_G_Wh": self.mean("s_G_Wh"),
            "mean_accepted_fraction": self.mean("accepted_fraction"),
            "mean_demand_coverage": self.mean("demand_coverage"),
            "mean_grid_only_cost": self.mean("grid_only_cost"),
            "mean_no_opt_cost": self.mean("no_opt_cost"),
            "mean_message_count": self.mean("message_count"),
        }


class FleetCache:
    """Memo of fleet states keyed by (n_ev, seed); grid parameters do not affect them."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._states: dict = {}

    def get(self, n_ev: int, seed: int) -> FleetState:
        key = (int(n_ev), int(seed))
        if key not in self._states:
            self._states[key] = simulate_fleet(self.config, seed, n_ev)
        return self._states[key]


def sweep(config: ScenarioConfig, cache: FleetCache | None = None, progress=None) -> list[CellResult]:
    """Every sweep cell, each over ``config.rounds`` seeded repetitions.

    Repetition ``r`` uses the same seed in every cell, so cells differ only
    in market parameters. A failing round is recorded and skipped.
    """
    cache = cache or FleetCache(config)
    results = []
    for p_ev, m_g, cap, n_ev in config.sweep.cells():
        grid = replace(config.grid, p_EV=float(p_ev), m_G=float(m_g), s_G_cap=float(cap))
        cell = CellResult(float(p_ev), float(m_g), float(cap), int(n_ev))
        for r in range(config.rounds):
            seed = repetition_seed(config.rng_seed, r)
            try:
                cell.reports.append(solve_round(config, cache.get(n_ev, seed), grid))
            except (InfeasibleError, ValueError) as exc:
                cell.failures.append((seed, str(exc)))
            if progress:
                progress(cell, r)
        results.append(cell)
    return results


# ---------------------------------------------------------------- export

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return str(value)


def _csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        columns = list(rows[0])
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def export_results(table: Sequence[CellResult], out_dir: str | Path,
                   config: ScenarioConfig | None = None) -> list[Path]:
    """Write one CSV per cell, a summary CSV and ``manifest.json``.

    Everything except the manifest's ``timestamp`` is a pure function of
    the table and config.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for cell in table:
            rows = [r.row() for r in cell.reports]
            path = out / f"cell_{cell.key}.csv"
            path.write_text(_csv_text(rows))
            written.append(path)
        if table:
            path = out / "summary.csv"
            path.write_text(_csv_text([c.summary() for c in table]))
            written.append(path)
        manifest = {
            "config_hash": config_hash(config) if config else None,
            "seed": config.rng_seed if config else None,
            "git_describe": git_describe(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "files": [p.name for p in written],
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return written


# ---------------------------------------------------------------- messages

class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class MessageFit:
    slope: Fraction
    intercept: Fraction
    n_points: int


def message_complexity_report(reports: Sequence[RoundReport]) -> MessageFit:
    """Exact least-squares fit of messages against participants.

    Participants are demanders plus offering suppliers. The fit uses
    rational arithmetic, so a linear relation gives a residual of exactly 0;
    anything else raises :class:`ContractViolation`, as does a slope other
    than 1.
    """
    if not reports:
        raise ValueError("need at least one report")
    x = [Fraction(r.n_demanders + r.n_offering) for r in reports]
    y = [Fraction(r.message_count) for r in reports]
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxx = sum((a - mx) ** 2 for a in x)
    if sxx == 0:
        # No spread in participants: only the offset can be checked.
        slope = Fraction(1)
    else:
        slope = sum((a - mx) * (b - my) for a, b in zip(x, y)) / sxx
    intercept = my - slope * mx
    residual = sum((b - slope * a - intercept) ** 2 for a, b in zip(x, y))
    if residual != 0:
        raise ContractViolation(f"message counts are not linear in participants (residual {residual})")
    if slope != 1:
        raise ContractViolation(f"message slope is {slope}, expected 1")
    return MessageFit(slope, intercept, n)


# ---------------------------------------------------------------- bounds

def calibrate_soc_distributions(config: ScenarioConfig, seed: int = 12345) -> dict:
    """Per-class lognormal law of the remaining charge, from a pilot sample.

    The pilot draws pre-trip charge and route length exactly as a round does
    but drives every route at the class speed limit. The lognormal is then
    fitted so its two tails match the pilot's tail frequencies at the
    configured min/max thresholds.
    """
    rng = np.random.default_rng(seed)
    out = {}
    n = config.bounds.pilot_samples
    for c in range(3):
        spec = config.spec(c)
        limit = config.road.limits_array()[c]
        per_m = route_energy(spec, config.environment,
                             VelocityTrace.constant(float(limit), 1000.0, config.seg_len_m),
                             config.energy) / 1000.0
        classes = np.full(n, c)
        current = draw_soc(config, classes, rng)
        routes = rng.lognormal(math.log(config.route.route_median_m), config.route.sigma_log, n)
        remaining = current - per_m * routes
        bc = spec.battery_capacity_Wh
        smin, smax = config.soc.min_frac * bc, config.soc.max_frac * bc
        p_above = float(np.mean(remaining >= smax))
        p_below = float(np.mean(remaining <= smin))
        eps = 1.0 / n
        dist = SOCDistribution.from_tail_probabilities(min(max(p_above, eps), 1 - 2 * eps),
                                                       min(max(p_below, eps), 1 - 2 * eps),
                                                       smax, max(smin, 1e-9))
        out[CLASSES[c]] = (dist, float(current.mean()))
    return out


def table_soc_distributions(config: ScenarioConfig, seed: int = 12345) -> dict:
    """Per-class published lognormal, paired with the pilot mean pre-trip charge."""
    rng = np.random.default_rng(seed)
    out = {}
    for c, cls in enumerate(CLASSES):
        current = draw_soc(config, np.full(config.bounds.pilot_samples, c), rng)
        out[cls] = (SOCDistribution.from_median(TABLE_SOC_MEDIAN_WH[cls], TABLE_SOC_SIGMA), float(current.mean()))
    return out


def soc_distributions(config: ScenarioConfig) -> dict:
    if config.bounds.soc_source == "pilot":
        return calibrate_soc_distributions(config)
    return table_soc_distributions(config)


def bound_table(config: ScenarioConfig, n_ev: int, calibration: dict | None = None) -> dict:
    """Class -> (S_UB, D_UB) for ``n_ev`` vehicles."""
    calibration = calibration or soc_distributions(config)
    probs = config.class_probs
    table = {}
    for c in range(3):
        cls = CLASSES[c]
        dist, mean_current = calibration[cls]
        spec = config.spec(c)
        bc = spec.battery_capacity_Wh
        soc = SOCState(mean_current, config.soc.min_frac * bc, config.soc.max_frac * bc, config.soc.alpha)
        table[cls] = supply_demand_upper_bounds(n_ev, float(probs[c]), dist, soc,
                                                literal_demand_tail=config.bounds.literal_demand_tail)
    return table
