"""Ring-road highway traffic with Krauss car-following, plus velocity forecasters.

The road is modelled as a closed loop of ``length_m``: a vehicle that passes
the end re-enters at the start with a freshly drawn route. That keeps the
density constant over long runs without a separate inflow process. Vehicles
never change lane.

Positions refer to the front bumper. The physical gap to the leader is
``x_leader - x_follower - length_leader`` (modulo the ring length).
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ev_model import EVClass, VelocityTrace

CLASSES = (EVClass.CAR, EVClass.BUS, EVClass.LORRY)
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

# Published weights are 60/40/40, which do not sum to one.
RAW_CLASS_WEIGHTS = (0.6, 0.4, 0.4)


def normalize_class_probs(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError(f"class weights must be three non-negative numbers, got {weights!r}")
    return w / w.sum()


DEFAULT_CLASS_PROBS = tuple(normalize_class_probs(RAW_CLASS_WEIGHTS))


@dataclass(frozen=True)
class VehicleDynamics:
    length_m: float
    max_accel_m_s2: float


DEFAULT_DYNAMICS = {
    EVClass.CAR: VehicleDynamics(5.0, 1.5),
    EVClass.BUS: VehicleDynamics(12.0, 1.5),
    EVClass.LORRY: VehicleDynamics(16.0, 1.0),
}


@dataclass(frozen=True)
class RoadConfig:
    length_m: float = 20_000.0
    lane_count: int = 3
    speed_limit_m_s: dict = field(default_factory=lambda: {
        EVClass.CAR: 31.29, EVClass.BUS: 31.29, EVClass.LORRY: 26.82})
    station_positions_m: tuple = ()
    reaction_s: float = 1.0
    max_decel_m_s2: float = 4.5
    min_gap_m: float = 2.5
    dawdle: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.length_m) and self.length_m > 0):
            raise ValueError("road length must be > 0")
        if int(self.lane_count) != self.lane_count or self.lane_count < 1:
            raise ValueError("lane_count must be an integer >= 1")
        limits = {EVClass(k): float(v) for k, v in self.speed_limit_m_s.items()}
        if set(limits) != set(CLASSES) or any(not v > 0 for v in limits.values()):
            raise ValueError("speed limits must be > 0 for car, bus and lorry")
        object.__setattr__(self, "speed_limit_m_s", limits)
        stations = tuple(float(s) for s in self.station_positions_m)
        if any(not 0 <= s <= self.length_m for s in stations):
            raise ValueError("station positions must lie on the road")
        object.__setattr__(self, "station_positions_m", stations)
        if not (self.reaction_s > 0 and self.max_decel_m_s2 > 0 and self.min_gap_m >= 0):
            raise ValueError("reaction time and deceleration must be > 0, min gap >= 0")
        if not 0 <= self.dawdle <= 1:
            raise ValueError("dawdle must be in [0, 1]")

    def limit_for(self, ev_class: EVClass) -> float:
        return self.speed_limit_m_s[EVClass(ev_class)]

    def limits_array(self) -> np.ndarray:
        return np.array([self.speed_limit_m_s[c] for c in CLASSES])


@dataclass
class VehicleState:
    id: int
    ev_class: EVClass
    position_m: float
    lane: int
    velocity_m_s: float
    route_length_m: float
    supply_trip_m: float

    @property
    def length_m(self) -> float:
        return DEFAULT_DYNAMICS[self.ev_class].length_m


def krauss_safe_velocity(follower: VehicleState, leader: VehicleState | None,
                         reaction_s: float = 1.0, max_decel_m_s2: float = 4.5, *,
                         road: RoadConfig | None = None, dt_s: float = 1.0) -> float:
    """Desired follower speed for the next step (no dawdling).

    ``leader=None`` means nothing ahead (free flow). The safe speed is computed
    on the gap minus the road's minimum gap, measured on a straight line; the ring wrap is handled by :func:`simulate_step`.
    """
    road = road or RoadConfig()
    dyn = DEFAULT_DYNAMICS[follower.ev_class]
    v_limit = road.limit_for(follower.ev_class)
    v_free = min(follower.velocity_m_s + dyn.max_accel_m_s2 * dt_s, v_limit)
    if leader is None:
        return max(v_free, 0.0)
    gap = leader.position_m - follower.position_m - leader.length_m
    if gap < 0:
        raise ValueError(f"negative gap {gap:.3f} m between vehicles {follower.id} and {leader.id}")
    eff_gap = max(gap - road.min_gap_m, 0.0)
    v_safe = _safe_speed(np.array([eff_gap]), np.array([leader.velocity_m_s]),
                         np.array([follower.velocity_m_s]), reaction_s, max_decel_m_s2)[0]
    return max(min(v_free, v_safe), 0.0)


def _safe_speed(gap, v_lead, v_follow, tau, decel):
    return v_lead + (gap - v_lead * tau) / ((v_lead + v_follow) / (2.0 * decel) + tau)


@dataclass
class World:
    """Mutable traffic state stored as parallel arrays (one entry per vehicle)."""

    road: RoadConfig
    ids: np.ndarray
    classes: np.ndarray  # int index into CLASSES
    lanes: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    route_lengths: np.ndarray
    supply_trips: np.ndarray
    rng: np.random.Generator
    route_median_m: float = 10_000.0
    trip_median_m: float = 6_000.0
    route_sigma: float = 1.0
    time_s: float = 0.0
    odometer: np.ndarray | None = None
    record: bool = True
    history_t: list = field(default_factory=list)
    history_pos: list = field(default_factory=list)
    history_vel: list = field(default_factory=list)

    def __post_init__(self):
        if self.odometer is None:
            self.odometer = np.zeros(self.n)

    @property
    def n(self) -> int:
        return int(self.ids.size)

    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(int(self.ids[i]), CLASSES[self.classes[i]], float(self.positions[i]),
                             int(self.lanes[i]), float(self.velocities[i]),
                             float(self.route_lengths[i]), float(self.supply_trips[i]))
                for i in range(self.n)]

    def velocity_matrix(self) -> np.ndarray:
        """Recorded velocities, shape (steps, vehicles)."""
        if not self.history_vel:
            return np.zeros((0, self.n))
        return np.vstack(self.history_vel)

    def physical_gaps(self, leader: np.ndarray | None = None) -> np.ndarray:
        """Bumper-to-bumper distance to the leader in the same lane (inf if alone)."""
        lengths = _lengths(self.classes)
        gaps = np.full(self.n, np.inf)
        if leader is None:
            leader = _leaders(self.lanes, self.positions)
        has = leader >= 0
        dx = np.mod(self.positions[leader[has]] - self.positions[has], self.road.length_m)
        gaps[has] = dx - lengths[leader[has]]
        return gaps


def _lengths(classes: np.ndarray) -> np.ndarray:
    table = np.array([DEFAULT_DYNAMICS[c].length_m for c in CLASSES])
    return table[classes]


def _accels(classes: np.ndarray) -> np.ndarray:
    table = np.array([DEFAULT_DYNAMICS[c].max_accel_m_s2 for c in CLASSES])
    return table[classes]


def _leaders(lanes: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Index of each vehicle's leader on the ring, -1 when alone in its lane."""
    n = lanes.size
    if n == 0:
        return np.full(0, -1, dtype=np.int64)
    span = float(np.max(positions)) + 1.0 if positions.size else 1.0
    order = np.argsort(lanes * span + positions, kind="stable")
    sorted_lanes = lanes[order]
    is_start = np.r_[True, sorted_lanes[1:] != sorted_lanes[:-1]]
    is_end = np.r_[is_start[1:], True]
    lane_start = np.maximum.accumulate(np.where(is_start, np.arange(n), 0))
    nxt = np.where(is_end, lane_start, np.arange(n) + 1)
    leader = np.empty(n, dtype=np.int64)
    leader[order] = order[nxt]
    leader[leader == np.arange(n)] = -1
    return leader


def _draw_routes(rng, n, route_median_m, trip_median_m, sigma):
    routes = rng.lognormal(math.log(route_median_m), sigma, n)
    trips = rng.lognormal(math.log(trip_median_m), sigma, n)
    return routes, trips


def spawn_traffic(road: RoadConfig, n_ev: int, class_probs: Sequence[float] = DEFAULT_CLASS_PROBS,
                  route_median_m: float = 10_000.0, trip_median_m: float = 6_000.0,
                  route_sigma: float = 1.0, rng_seed: int | np.random.Generator = 0,
                  record: bool = True) -> World:
    """Place ``n_ev`` vehicles on the road without overlap.

    Classes follow ``class_probs``. Lanes are assigned round-robin over a
    random permutation so they stay balanced. Within a lane the free space is
    split uniformly at random between vehicles.

    Raises
    ------
    ValueError
        If any lane cannot hold its vehicles at the minimum gap.
    """
    if n_ev < 0:
        raise ValueError("n_ev must be >= 0")
    probs = np.asarray(class_probs, dtype=float)
    if probs.shape != (3,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
        raise ValueError("class_probs must be three non-negative numbers summing to 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    classes = rng.choice(3, size=n_ev, p=probs)
    lanes = np.empty(n_ev, dtype=np.int64)
    lanes[rng.permutation(n_ev)] = np.arange(n_ev) % road.lane_count
    positions = np.zeros(n_ev)
    lengths = _lengths(classes)
    for lane in range(road.lane_count):
        idx = np.flatnonzero(lanes == lane)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        slot = lengths[idx] + road.min_gap_m
        free = road.length_m - slot.sum()
        if free < 0:
            raise ValueError(f"road of {road.length_m} m cannot hold {n_ev} vehicles "
                             f"({idx.size} in lane {lane})")
        offsets = np.sort(rng.uniform(0.0, free, idx.size))
        positions[idx] = offsets + np.cumsum(slot) - road.min_gap_m
    limits = road.limits_array()[classes]
    velocities = limits * rng.uniform(0.6, 1.0, n_ev)
    routes, trips = _draw_routes(rng, n_ev, route_median_m, trip_median_m, route_sigma)
    world = World(road, np.arange(n_ev), classes, lanes, positions, velocities, routes, trips,
                  rng, route_median_m, trip_median_m, route_sigma, record=record)
    # Initial speeds are random; make them safe before the first step.
    world.velocities = _collision_clamp(world, world.velocities, world.physical_gaps(), 1.0)
    return world


def _collision_clamp(world: World, v_new: np.ndarray, gaps: np.ndarray, dt: float,
                     leader: np.ndarray | None = None) -> np.ndarray:
    """Lower speeds until no follower would drive into its leader this step."""
    if leader is None:
        leader = _leaders(world.lanes, world.positions)
    has = np.flatnonzero(leader >= 0)
    if has.size == 0:
        return v_new
    v = v_new.copy()
    for _ in range(world.n + 1):
        bound = np.maximum(gaps[has] / dt + v[leader[has]], 0.0)
        over = v[has] > bound
        if not over.any():
            return v
        v[has[over]] = bound[over]
    raise RuntimeError("collision clamp did not converge")


def simulate_step(world: World, dt_s: float = 1.0) -> World:
    """Advance every vehicle by one Krauss update (in place; returns ``world``)."""
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    road = world.road
    if world.n:
        leader = _leaders(world.lanes, world.positions)
        gaps = world.physical_gaps(leader)
        if np.any(gaps < -1e-9):
            raise RuntimeError("vehicles overlap: simulation state is corrupt")
        gaps = np.maximum(gaps, 0.0)
        v = world.velocities
        limits = road.limits_array()[world.classes]
        accel = _accels(world.classes)
        desired = np.minimum(v + accel * dt_s, limits)
        has = leader >= 0
        eff_gap = np.maximum(gaps[has] - road.min_gap_m, 0.0)
        v_safe = _safe_speed(eff_gap, v[leader[has]], v[has], road.reaction_s, road.max_decel_m_s2)
        desired[has] = np.minimum(desired[has], v_safe)
        desired = np.maximum(desired, 0.0)
        if road.dawdle > 0:
            desired = np.maximum(desired - road.dawdle * accel * dt_s * world.rng.random(world.n), 0.0)
        v_new = _collision_clamp(world, desired, gaps, dt_s, leader)
        world.positions = world.positions + v_new * dt_s
        world.odometer = world.odometer + v_new * dt_s
        world.velocities = v_new
        wrapped = world.positions >= road.length_m
        if wrapped.any():
            world.positions[wrapped] -= road.length_m
            routes, trips = _draw_routes(world.rng, int(wrapped.sum()), world.route_median_m,
                                         world.trip_median_m, world.route_sigma)
            world.route_lengths[wrapped] = routes
            world.supply_trips[wrapped] = trips
    world.time_s += dt_s
    if world.record:
        world.history_t.append(world.time_s)
        world.history_pos.append(world.positions.copy())
        world.history_vel.append(world.velocities.copy())
    return world


def run(world: World, steps: int, dt_s: float = 1.0) -> World:
    for _ in range(steps):
        simulate_step(world, dt_s)
    return world


def write_trace_csv(world: World, path: str | Path) -> Path:
    """Dump recorded (id, t, position, velocity) rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t", "position_m", "velocity_m_s"])
        for t, pos, vel in zip(world.history_t, world.history_pos, world.history_vel):
            for i in range(world.n):
                writer.writerow([int(world.ids[i]), f"{t:.3f}", f"{pos[i]:.6f}", f"{vel[i]:.6f}"])
    return path


# ---------------------------------------------------------------- forecasting

class ForecastMethod(str, enum.Enum):
    ORACLE = "oracle"
    SPEED_LIMIT = "speed_limit"
    MOVING_AVERAGE = "moving_average"


@dataclass(frozen=True)
class ForecasterKind:
    method: ForecastMethod = ForecastMethod.ORACLE
    window: int = 60

    def __post_init__(self):
        object.__setattr__(self, "method", ForecastMethod(self.method))
        if self.window < 1:
            raise ValueError("moving-average window must be >= 1")

    @classmethod
    def oracle(cls) -> "ForecasterKind":
        return cls(ForecastMethod.ORACLE)

    @classmethod
    def speed_limit(cls) -> "ForecasterKind":
        return cls(ForecastMethod.SPEED_LIMIT)

    @classmethod
    def moving_average(cls, window: int) -> "ForecasterKind":
        return cls(ForecastMethod.MOVING_AVERAGE, window)


def time_series_to_trace(velocities: np.ndarray, dt_s: float, seg_len_m: float,
                         initial_velocity: float | None = None) -> VelocityTrace | None:
    """Re-bin a fixed-step velocity series into fixed-length road segments.

    Each segment's speed is its length divided by the time spent covering it,
    so the total travel time and distance are both preserved. Time spent
    standing still is charged to the segment where the vehicle stopped; a
    trailing stop goes to the last segment. Returns ``None`` if the vehicle
    never moved.
    """
    v = np.asarray(velocities, dtype=float)
    dist = np.concatenate([[0.0], np.cumsum(v * dt_s)])
    total = dist[-1]
    if total <= 0:
        return None
    n_full = int(total // seg_len_m)
    edges = np.arange(1, n_full + 1) * seg_len_m
    if total - n_full * seg_len_m > 1e-9 * total or n_full == 0:
        edges = np.append(edges, total)
    else:
        edges[-1] = total
    times = np.arange(v.size + 1) * dt_s
    # First time each edge is reached; the last edge ends with the series.
    k = np.searchsorted(dist, edges, side="left")
    k = np.clip(k, 1, v.size)
    reach = times[k - 1] + (edges - dist[k - 1]) / np.where(v[k - 1] > 0, v[k - 1], np.inf)
    reach[-1] = times[-1]
    seg_time = np.diff(np.concatenate([[0.0], reach]))
    lengths = np.diff(np.concatenate([[0.0], edges]))
    keep = lengths > 0
    return VelocityTrace(lengths[keep], lengths[keep] / seg_time[keep], initial_velocity)


def fit_to_length(trace: VelocityTrace, route_len_m: float) -> VelocityTrace:
    """Repeat ``trace`` end to end and cut it so it covers exactly ``route_len_m``."""
    if not route_len_m > 0:
        raise ValueError("route length must be > 0")
    total = trace.total_length_m
    if total <= 0:
        raise ValueError("cannot stretch an empty trace")
    reps = int(math.ceil(route_len_m / total - 1e-12))
    lengths = np.tile(trace.lengths_m, max(reps, 1))
    velocities = np.tile(trace.velocities_m_s, max(reps, 1))
    cum = np.cumsum(lengths)
    last = int(np.searchsorted(cum, route_len_m * (1 - 1e-12), side="left"))
    lengths = lengths[:last + 1].copy()
    lengths[-1] -= cum[last] - route_len_m
    velocities = velocities[:last + 1]
    return VelocityTrace(lengths, velocities, trace.initial_velocity)


def forecast_route_velocities(kind: ForecasterKind, history: VelocityTrace | Sequence[float],
                              route_len_m: float, seg_len_m: float, speed_limit_m_s: float,
                              future: VelocityTrace | None = None) -> VelocityTrace:
    """Predict the velocity trace of a route of ``route_len_m``.

    ``history`` may be a trace or a plain sequence of recent speeds. ``future``
    is required by the oracle, which returns it stretched or cut to the route
    length.
    """
    if not (seg_len_m > 0 and route_len_m > 0):
        raise ValueError("route and segment lengths must be > 0")
    if kind.method is ForecastMethod.ORACLE:
        if future is None:
            raise ValueError("the oracle forecaster needs the actual future trace")
        if abs(future.total_length_m - route_len_m) <= 1e-9 * route_len_m:
            return future
        return fit_to_length(future, route_len_m)
    speed = speed_limit_m_s
    if kind.method is ForecastMethod.MOVING_AVERAGE:
        past = history.velocities_m_s if isinstance(history, VelocityTrace) else np.asarray(history, float)
        if past.size:
            speed = float(np.mean(past[-kind.window:]))
    if speed <= 0:
        speed = speed_limit_m_s
    return VelocityTrace.constant(speed, route_len_m, seg_len_m)
