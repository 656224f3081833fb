"""Closed-form population estimates: SOC tail probabilities, supply/demand
upper bounds per vehicle class and charging-station arrival expectations."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .ev_model import SOCState
from .game import participation_mask
from .optimizer import GridParams, SupplyOffer, ev_utility, utility_maximizer


class Tail(str, enum.Enum):
    ABOVE_MAX = "above_max"
    BELOW_MIN = "below_min"


@dataclass(frozen=True)
class SOCDistribution:
    """Lognormal law of the remaining state of charge (Wh)."""

    mu_log: float
    sigma_log: float
    source_note: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.mu_log) and math.isfinite(self.sigma_log) and self.sigma_log > 0):
            raise ValueError("need finite mu_log and sigma_log > 0")

    @classmethod
    def from_median(cls, median_Wh: float, sigma_log: float) -> "SOCDistribution":
        if not median_Wh > 0:
            raise ValueError("median must be > 0")
        return cls(math.log(median_Wh), sigma_log, f"median {median_Wh:g} Wh")

    @classmethod
    def from_tail_probabilities(cls, p_above: float, p_below: float, soc_max_Wh: float,
                                soc_min_Wh: float) -> "SOCDistribution":
        """Lognormal whose two tails match the given probabilities exactly."""
        if not (0 < p_above < 1 and 0 < p_below < 1 and p_above + p_below < 1):
            raise ValueError("tail probabilities must be in (0, 1) and sum below 1")
        z_min, z_max = norm.ppf(p_below), norm.ppf(1 - p_above)
        sigma = (math.log(soc_max_Wh) - math.log(soc_min_Wh)) / (z_max - z_min)
        mu = math.log(soc_min_Wh) - z_min * sigma
        return cls(mu, sigma, f"tail-matched P(>=max)={p_above:.4g} P(<=min)={p_below:.4g}")

    @classmethod
    def fit(cls, samples_Wh: Iterable[float]) -> "SOCDistribution":
        """Log-moment fit on the strictly positive samples."""
        x = np.asarray(list(samples_Wh), dtype=float)
        x = x[x > 0]
        if x.size < 2:
            raise ValueError("need at least two positive samples")
        logs = np.log(x)
        return cls(float(logs.mean()), float(logs.std(ddof=1)), f"log-moment fit on {x.size} samples")

    @property
    def mean(self) -> float:
        return math.exp(self.mu_log + self.sigma_log ** 2 / 2)

    @property
    def median(self) -> float:
        return math.exp(self.mu_log)


def lognormal_tail(dist: SOCDistribution, threshold_Wh: float, side: Tail,
                   literal_scale: bool = False) -> float:
    """P(X >= t) or P(X <= t) through the error function.

    ``literal_scale`` divides by sqrt(2 * sigma) instead of sigma * sqrt(2),
    which only coincides with the lognormal law when sigma is 1.
    """
    if not threshold_Wh > 0:
        raise ValueError("threshold must be > 0")
    scale = math.sqrt(2 * dist.sigma_log) if literal_scale else dist.sigma_log * math.sqrt(2)
    cdf = 0.5 * (1 + math.erf((math.log(threshold_Wh) - dist.mu_log) / scale))
    return 1 - cdf if Tail(side) is Tail.ABOVE_MAX else cdf


def supply_demand_upper_bounds(n_ev: int, class_prob: float, dist: SOCDistribution,
                               soc_cfg: SOCState, alpha: float | None = None,
                               literal_demand_tail: bool = False) -> tuple[float, float]:
    """Population bounds (Wh) on one class's total supply and total demand.

    ``soc_cfg.current_Wh`` is read as the class's mean pre-trip charge.
    Demand is triggered by the lower tail; ``literal_demand_tail`` reuses the
    upper tail instead.
    """
    if n_ev < 0 or not 0 <= class_prob <= 1:
        raise ValueError("need n_ev >= 0 and class_prob in [0, 1]")
    alpha = soc_cfg.surplus_fraction if alpha is None else alpha
    p_max = lognormal_tail(dist, soc_cfg.max_Wh, Tail.ABOVE_MAX)
    if literal_demand_tail:
        p_dem = p_max
    elif soc_cfg.min_Wh > 0:
        p_dem = lognormal_tail(dist, soc_cfg.min_Wh, Tail.BELOW_MIN)
    else:
        p_dem = 0.0
    s_ub = n_ev * class_prob * p_max * alpha * dist.mean
    d_ub = n_ev * class_prob * p_dem * max(soc_cfg.max_Wh - soc_cfg.current_Wh, 0.0)
    return s_ub, d_ub


# ---------------------------------------------------------------- stations

@dataclass(frozen=True)
class StationLayout:
    road_length_m: float = 20_000.0
    mean_trip_m: float = 6_000.0
    n_stations: int | None = None
    lambda_supp: float = 0.0
    lambda_dem: float = 0.0

    def __post_init__(self):
        if not (self.road_length_m > 0 and self.mean_trip_m > 0):
            raise ValueError("road length and mean trip must be > 0")
        if self.n_stations is None:
            object.__setattr__(self, "n_stations", max(int(self.road_length_m // self.mean_trip_m), 1))
        if self.n_stations < 1:
            raise ValueError("n_stations must be >= 1")
        if self.lambda_supp < 0 or self.lambda_dem < 0:
            raise ValueError("arrival rates must be >= 0")


def truncated_poisson_mean(rate: float, k_max: int) -> float:
    """sum_{k=0}^{k_max} k * Poisson(k; rate)."""
    if rate < 0 or k_max < 0:
        raise ValueError("rate and k_max must be >= 0")
    if rate == 0:
        return 0.0
    k = np.arange(1, k_max + 1)
    log_pmf = -rate + k * math.log(rate) - np.array([math.lgamma(v + 1) for v in k])
    return float(np.sum(k * np.exp(log_pmf)))


def expected_sellers_per_station(layout: StationLayout) -> float:
    n = layout.n_stations
    return truncated_poisson_mean(layout.lambda_supp / n, n)


def expected_buyers_per_station(layout: StationLayout) -> float:
    return layout.lambda_dem / layout.n_stations


@dataclass(frozen=True)
class StationChoice:
    n_stations: int
    score: float
    scores: dict


def qualifying_sellers(grid: GridParams, offered_Wh: Sequence[float], trip_m: float,
                       delta: float, road_charge: float) -> int:
    """Sellers whose best utility clears the anti-conspiracy threshold."""
    utilities = []
    for amount in offered_Wh:
        offer = SupplyOffer(0, float(amount), trip_m, delta)
        utilities.append(ev_utility(grid, offer, utility_maximizer(grid, offer)))
    return int(participation_mask(utilities, road_charge).sum())


def optimal_station_count(road_length_m: float, grid: GridParams, offered_Wh: Sequence[float],
                          candidates: Iterable[int], delta: float = 0.1,
                          road_charge: float = 150.0) -> StationChoice:
    """Station count maximizing the expected sellers per station.

    For ``n`` stations spread evenly, the mean distance to the nearest one is
    ``road_length / (2 n)``. The sellers at that distance form the arrival
    rate of the truncated Poisson mean. Ties go to the smaller count.
    """
    cands = sorted(set(int(c) for c in candidates))
    if not cands or cands[0] < 1:
        raise ValueError("candidates must be a non-empty set of integers >= 1")
    scores = {}
    for n in cands:
        trip = road_length_m / (2 * n)
        sellers = qualifying_sellers(grid, offered_Wh, trip, delta, road_charge)
        scores[n] = truncated_poisson_mean(sellers / n, n)
    best = max(cands, key=lambda n: (scores[n], -n))
    return StationChoice(best, scores[best], scores)


def write_bounds_csv(rows: Sequence[dict], path: str | Path) -> Path:
    """Rows with keys class, S_UB_Wh, D_UB_Wh, sim_supply_Wh, sim_demand_Wh."""
    path = Path(path)
    columns = ["class", "S_UB_Wh", "D_UB_Wh", "sim_supply_Wh", "sim_demand_Wh"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row.get(k), float) else row.get(k, ""))
                             for k in columns})
    return path
