"""Longitudinal EV energy model and demand/supply classification.

Energies are in Wh, power in W, distances in m and speeds in m/s.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

ETA_FLOOR = 0.05
V_FLOOR = 0.1


class EVClass(str, enum.Enum):
    CAR = "car"
    BUS = "bus"
    LORRY = "lorry"


@dataclass(frozen=True)
class EVSpec:
    """Static parameters of one vehicle class."""

    ev_class: EVClass
    mass_kg: float
    frontal_area_m2: float
    rolling_resist: float
    drag_coeff: float
    wheel_radius_m: float
    gear_ratio: float
    motor_power_W: float
    battery_capacity_Wh: float
    per_unit_consumption: float = 0.1  # Wh per m of supply trip

    def __post_init__(self):
        for name in ("mass_kg", "frontal_area_m2", "rolling_resist", "drag_coeff",
                     "wheel_radius_m", "gear_ratio", "motor_power_W",
                     "battery_capacity_Wh", "per_unit_consumption"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"EVSpec.{name} must be finite and > 0, got {value!r}")


PRESETS: dict[EVClass, EVSpec] = {
    EVClass.CAR: EVSpec(EVClass.CAR, 1619.0, 2.56, 0.01, 0.28, 0.2, 7.94, 110e3, 40e3),
    EVClass.BUS: EVSpec(EVClass.BUS, 2375.0, 2.56, 0.08, 0.6, 0.28, 3.98, 200e3, 320e3),
    EVClass.LORRY: EVSpec(EVClass.LORRY, 3556.0, 5.98, 0.011, 0.8, 0.28, 3.73, 220e3, 112e3),
}


@dataclass(frozen=True)
class Environment:
    road_grade: float = 0.06
    air_density_kg_m3: float = 1.28
    gravity_m_s2: float = 9.81

    def __post_init__(self):
        if not self.air_density_kg_m3 >= 0:
            raise ValueError("air density must be >= 0")
        if not self.gravity_m_s2 > 0:
            raise ValueError("gravity must be > 0")
        if not abs(self.road_grade) < 1:
            raise ValueError("|road_grade| must be < 1")

    @property
    def angle(self) -> float:
        return math.atan(self.road_grade)


@dataclass(frozen=True)
class VelocityTrace:
    """Piecewise-constant velocity profile over consecutive road segments.

    ``initial_velocity`` is the speed entering the first segment; it defaults
    to the first segment's own speed (no initial acceleration). Concatenating
    two traces is energy-additive when the second one's ``initial_velocity``
    equals the last speed of the first.
    """

    lengths_m: np.ndarray
    velocities_m_s: np.ndarray
    initial_velocity: float | None = None

    def __post_init__(self):
        lengths = np.asarray(self.lengths_m, dtype=float).reshape(-1)
        velocities = np.asarray(self.velocities_m_s, dtype=float).reshape(-1)
        if lengths.shape != velocities.shape:
            raise ValueError("lengths and velocities must have the same length")
        if not (np.all(np.isfinite(lengths)) and np.all(np.isfinite(velocities))):
            raise ValueError("trace contains non-finite values")
        if np.any(lengths <= 0):
            raise ValueError("segment lengths must be > 0")
        if np.any(velocities < 0):
            raise ValueError("velocities must be >= 0")
        if self.initial_velocity is not None and not (self.initial_velocity >= 0):
            raise ValueError("initial velocity must be >= 0")
        object.__setattr__(self, "lengths_m", lengths)
        object.__setattr__(self, "velocities_m_s", velocities)

    def __len__(self) -> int:
        return self.lengths_m.size

    @classmethod
    def constant(cls, velocity: float, route_len_m: float, seg_len_m: float) -> "VelocityTrace":
        n_full = int(route_len_m // seg_len_m)
        lengths = [seg_len_m] * n_full
        rest = route_len_m - n_full * seg_len_m
        if rest > 1e-9 * route_len_m:
            lengths.append(rest)
        return cls(np.array(lengths), np.full(len(lengths), float(velocity)))

    @property
    def v0(self) -> float:
        if self.initial_velocity is not None:
            return float(self.initial_velocity)
        return float(self.velocities_m_s[0]) if len(self) else 0.0

    @property
    def total_length_m(self) -> float:
        return float(self.lengths_m.sum())

    @property
    def total_time_s(self) -> float:
        return float(np.sum(self.lengths_m / np.maximum(self.velocities_m_s, V_FLOOR)))

    def concat(self, other: "VelocityTrace") -> "VelocityTrace":
        return VelocityTrace(
            np.concatenate([self.lengths_m, other.lengths_m]),
            np.concatenate([self.velocities_m_s, other.velocities_m_s]),
            self.initial_velocity,
        )


@dataclass(frozen=True)
class SOCState:
    current_Wh: float
    min_Wh: float
    max_Wh: float
    surplus_fraction: float = 0.2

    def __post_init__(self):
        if not 0 <= self.min_Wh < self.max_Wh:
            raise ValueError("need 0 <= min_Wh < max_Wh")
        if not self.current_Wh >= 0:
            raise ValueError("current_Wh must be >= 0")
        if not 0 < self.surplus_fraction <= 1:
            raise ValueError("surplus_fraction must be in (0, 1]")

    @classmethod
    def for_spec(cls, spec: EVSpec, current_Wh: float, min_frac: float = 0.2,
                 max_frac: float = 0.8, alpha: float = 0.2) -> "SOCState":
        if current_Wh > spec.battery_capacity_Wh:
            raise ValueError("current SOC exceeds battery capacity")
        bc = spec.battery_capacity_Wh
        return cls(current_Wh, min_frac * bc, max_frac * bc, alpha)


@dataclass(frozen=True)
class EnergyPosition:
    demand_Wh: float
    supply_Wh: float
    remaining_Wh: float
    battery_infeasible: bool = False


@dataclass(frozen=True)
class EnergyOptions:
    """Knobs for :func:`route_energy`.

    ``literal_total_time`` multiplies every segment's power by the whole-route
    time instead of the segment's own time.
    """

    literal_total_time: bool = False
    regen_efficiency: float = 0.0
    eta_floor: float = ETA_FLOOR
    v_floor: float = V_FLOOR

    def __post_init__(self):
        if not 0 <= self.regen_efficiency <= 1:
            raise ValueError("regen_efficiency must be in [0, 1]")
        if not 0 < self.eta_floor <= 1:
            raise ValueError("eta_floor must be in (0, 1]")
        if not self.v_floor > 0:
            raise ValueError("v_floor must be > 0")


def _check_finite(**values):
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


def traction_force(spec: EVSpec, env: Environment, v_prev: float, v: float,
                   seg_len: float) -> float:
    """Tractive force in N over one segment; negative while decelerating."""
    _check_finite(v_prev=v_prev, v=v, seg_len=seg_len)
    if seg_len <= 0:
        raise ValueError("seg_len must be > 0")
    if v < 0 or v_prev < 0:
        raise ValueError("velocities must be >= 0")
    m, g, theta = spec.mass_kg, env.gravity_m_s2, env.angle
    accel = (v * v - v_prev * v_prev) / (2.0 * seg_len)
    return (m * g * math.sin(theta)
            + m * g * math.cos(theta) * spec.rolling_resist
            + env.air_density_kg_m3 * spec.frontal_area_m2 * spec.drag_coeff * v * v / 2.0
            + m * accel)


def drivetrain_efficiency(spec: EVSpec, force: float, v: float,
                          eta_floor: float = ETA_FLOOR) -> tuple[float, bool]:
    """Electrical-to-mechanical efficiency and whether it was clamped.

    Torque times traction speed collapses to ``force * v``, so the raw value is
    ``force * v / motor_power``. It is clamped into ``[eta_floor, 1]``.

    Raises
    ------
    ValueError
        If ``v == 0``: efficiency is undefined for a stationary vehicle.
    """
    _check_finite(force=force, v=v)
    if v == 0:
        raise ValueError("efficiency undefined at v == 0")
    torque = force * spec.wheel_radius_m / spec.gear_ratio
    omega = v * spec.gear_ratio / spec.wheel_radius_m
    eta = torque * omega / spec.motor_power_W
    if eta > 1.0:
        return 1.0, True
    if eta < eta_floor:
        return eta_floor, True
    return eta, False


def segment_powers(spec: EVSpec, env: Environment, trace: VelocityTrace,
                   options: EnergyOptions = EnergyOptions()) -> np.ndarray:
    """Electrical power drawn on every segment of ``trace`` (W)."""
    v = trace.velocities_m_s
    if v.size == 0:
        return np.zeros(0)
    v_prev = np.empty_like(v)
    v_prev[0] = trace.v0
    v_prev[1:] = v[:-1]
    m, g, theta = spec.mass_kg, env.gravity_m_s2, env.angle
    force = (m * g * math.sin(theta)
             + m * g * math.cos(theta) * spec.rolling_resist
             + env.air_density_kg_m3 * spec.frontal_area_m2 * spec.drag_coeff * v * v / 2.0
             + m * (v * v - v_prev * v_prev) / (2.0 * trace.lengths_m))
    mech = force * v
    eta = np.clip(mech / spec.motor_power_W, options.eta_floor, 1.0)
    return np.where(mech > 0, mech / eta, options.regen_efficiency * mech)


def route_energy(spec: EVSpec, env: Environment, trace: VelocityTrace,
                 options: EnergyOptions = EnergyOptions()) -> float:
    """Energy in Wh consumed driving ``trace``.

    Braking segments add nothing unless ``options.regen_efficiency`` is set,
    in which case they recover that share of the (negative) tractive power.
    """
    if len(trace) == 0:
        return 0.0
    power = segment_powers(spec, env, trace, options)
    if options.literal_total_time:
        total_time = float(np.sum(trace.lengths_m / np.maximum(trace.velocities_m_s, options.v_floor)))
        joules = float(power.sum()) * total_time
    else:
        seg_time = trace.lengths_m / np.maximum(trace.velocities_m_s, options.v_floor)
        joules = float(np.dot(power, seg_time))
    return joules / 3600.0


def energy_position(soc: SOCState, ec_Wh: float) -> EnergyPosition:
    """Classify an EV as demander, supplier or neither after its route."""
    if not ec_Wh >= 0:
        raise ValueError("route energy must be >= 0")
    remaining = soc.current_Wh - ec_Wh
    demand = supply = 0.0
    if remaining <= soc.min_Wh:
        # A vehicle already above max that drains below min has nothing to top up.
        demand = max(soc.max_Wh - soc.current_Wh, 0.0)
    if remaining >= soc.max_Wh:
        supply = soc.surplus_fraction * remaining
    return EnergyPosition(demand, supply, remaining, remaining < 0)
