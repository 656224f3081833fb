"""Synthetic hourly wind and PV output for a small regional fleet.

Both profiles are deterministic given ``(rng_seed, month, hour)``: each stamp
derives its own random stream, so evaluating hours out of order or in
parallel gives the same numbers.

Calibration: ``pv_mean_Wh`` is the average per-panel output over the daytime
window (08:00-16:00, every month); ``wind_mean_Wh`` is the long-run average
per-turbine output over all hours. Defaults give 37.10 kWh and 38.65 kWh for
a fleet of 100.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

# Approximate London sunrise (local clock, h) and day length (h) on the 1st of each month.
SUNRISE_H = (8.1, 7.6, 6.8, 6.6, 5.5, 4.8, 4.8, 5.4, 6.3, 7.1, 7.0, 7.7)
DAYLENGTH_H = (7.9, 9.2, 11.0, 13.0, 14.8, 16.3, 16.6, 15.3, 13.5, 11.6, 9.7, 8.2)

DAYTIME_HOURS = tuple(range(8, 17))

_PV_TAG = 0x5056
_WIND_TAG = 0x57494E44


@dataclass(frozen=True)
class HourStamp:
    month: int
    hour: int

    def __post_init__(self):
        if not (1 <= self.month <= 12 and 0 <= self.hour <= 23):
            raise ValueError(f"invalid hour stamp month={self.month} hour={self.hour}")


@dataclass(frozen=True)
class RenewableFleet:
    n_wind: int = 50
    n_pv: int = 50
    wind_mean_Wh: float = 386.5
    pv_mean_Wh: float = 371.0
    pv_seasonal_amplitude: float = 0.5
    wind_seasonal_amplitude: float = 0.15
    noise_sigma: float = 0.25
    wind_ar_coeff: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_wind < 0 or self.n_pv < 0:
            raise ValueError("source counts must be >= 0")
        if self.wind_mean_Wh < 0 or self.pv_mean_Wh < 0:
            raise ValueError("mean outputs must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0 <= self.pv_seasonal_amplitude < 1 and 0 <= self.wind_seasonal_amplitude < 1):
            raise ValueError("seasonal amplitudes must be in [0, 1)")
        if not 0 <= self.wind_ar_coeff < 1:
            raise ValueError("wind_ar_coeff must be in [0, 1)")


def pv_season(month: int, amplitude: float) -> float:
    return 1.0 + amplitude * math.cos(2 * math.pi * (month - 7) / 12)


def wind_season(month: int, amplitude: float) -> float:
    return 1.0 + amplitude * math.cos(2 * math.pi * (month - 1) / 12)


def pv_shape(month: int, hour: int) -> float:
    """Clear-sky fraction for the hour starting at ``hour`` (evaluated mid-hour)."""
    rise, length = SUNRISE_H[month - 1], DAYLENGTH_H[month - 1]
    phase = (hour + 0.5 - rise) / length
    if not 0 < phase < 1:
        return 0.0
    return math.sin(math.pi * phase)


@lru_cache(maxsize=None)
def _pv_scale(amplitude: float) -> float:
    profile = [pv_shape(m, h) * pv_season(m, amplitude) for m in range(1, 13) for h in DAYTIME_HOURS]
    return 1.0 / float(np.mean(profile))


def _stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, *keys])


def pv_output(fleet: RenewableFleet, t: HourStamp, noise_factor: float | None = None) -> float:
    """Total PV energy (Wh) produced by the fleet during hour ``t``.

    ``noise_factor`` overrides the random multiplier (mean 1) when given.
    """
    shape = pv_shape(t.month, t.hour)
    if shape == 0.0 or fleet.n_pv == 0:
        return 0.0
    if noise_factor is None:
        s = fleet.noise_sigma
        z = _stream(fleet.rng_seed, _PV_TAG, t.month, t.hour).standard_normal()
        noise_factor = math.exp(s * z - s * s / 2)
    base = fleet.pv_mean_Wh * _pv_scale(fleet.pv_seasonal_amplitude)
    return fleet.n_pv * base * shape * pv_season(t.month, fleet.pv_seasonal_amplitude) * noise_factor


def wind_noise_day(fleet: RenewableFleet, month: int) -> np.ndarray:
    """AR(1) multiplier for the 24 hours of a representative day, floored at 0."""
    phi, s = fleet.wind_ar_coeff, fleet.noise_sigma
    eps = _stream(fleet.rng_seed, _WIND_TAG, month).standard_normal(24)
    x = np.empty(24)
    x[0] = s * eps[0]
    for h in range(1, 24):
        x[h] = phi * x[h - 1] + math.sqrt(1 - phi * phi) * s * eps[h]
    return np.maximum(1.0 + x, 0.0)


def wind_output(fleet: RenewableFleet, t: HourStamp) -> float:
    """Total wind energy (Wh) produced by the fleet during hour ``t``."""
    if fleet.n_wind == 0:
        return 0.0
    noise = wind_noise_day(fleet, t.month)[t.hour]
    return fleet.n_wind * fleet.wind_mean_Wh * wind_season(t.month, fleet.wind_seasonal_amplitude) * noise


def aggregate_renewables(fleet: RenewableFleet, t: HourStamp) -> tuple[float, float]:
    """(wind Wh, PV Wh) for one hour."""
    return wind_output(fleet, t), pv_output(fleet, t)


def write_profile_csv(fleet: RenewableFleet, path: str | Path,
                      months=range(1, 13), hours=range(24)) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "hour", "wind_Wh", "pv_Wh"])
        for m in months:
            for h in hours:
                wind, pv = aggregate_renewables(fleet, HourStamp(m, h))
                writer.writerow([m, h, f"{wind:.6f}", f"{pv:.6f}"])
    return path
