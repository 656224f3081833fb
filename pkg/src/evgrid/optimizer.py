"""Grid cost minimization with semi-continuous prosumer offers.

The grid buys energy from its own generation (``S_G``, continuous, capped)
and from EVs that offered surplus. An EV's accepted volume must either be 0
or lie in the interval where its selling utility is at least ``u_min``.
Everything else is linear, so the problem is a small mixed-integer program
whose only integrality comes from those on/off choices.

Prices, emission factors and the utility coefficients are expressed per
*market unit* of ``GridParams.unit_Wh`` watt-hours (1 kWh by default).
Energies in the API are always Wh.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

U_MIN = 1e-6
MAX_BRUTE_FORCE_OFFERS = 20


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"


class InfeasibleError(RuntimeError):
    """Raised by callers that need a feasible dispatch; carries the snapshot."""

    def __init__(self, message: str, snapshot: "MarketSnapshot | None" = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class GridParams:
    p_G: float = 12.0
    m_G: float = 0.05
    PC: float = 10.0
    p_EV: float = 6.0
    beta: float = 10.0
    a: float = 0.01
    b: float = 0.1
    loss_fraction: float = 0.02
    s_G_cap: float = 29e6  # Wh
    unit_Wh: float = 1000.0
    u_min: float = U_MIN

    def __post_init__(self):
        for name in ("p_G", "m_G", "PC", "p_EV", "beta", "loss_fraction", "s_G_cap", "u_min"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"GridParams.{name} must be finite and >= 0, got {value!r}")
        for name in ("a", "b", "unit_Wh"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"GridParams.{name} must be finite and > 0, got {value!r}")
        if not self.loss_fraction < 1:
            raise ValueError("GridParams.loss_fraction must be < 1")

    @property
    def grid_unit_cost(self) -> float:
        """Cost per generated Wh."""
        return (self.p_G + self.m_G * self.PC) / self.unit_Wh

    @property
    def grid_delivered_cost(self) -> float:
        """Cost per Wh that actually reaches demand after losses."""
        return self.grid_unit_cost / (1.0 - self.loss_fraction)

    @property
    def ev_unit_cost(self) -> float:
        return self.p_EV / self.unit_Wh



@dataclass(frozen=True)
class SupplyOffer:
    ev_id: int
    offered_Wh: float
    trip_m: float
    delta: float = 0.1  # Wh per m travelled to the station

    def __post_init__(self):
        if not (math.isfinite(self.offered_Wh) and self.offered_Wh > 0):
            raise ValueError(f"offer {self.ev_id}: offered_Wh must be > 0")
        if not (math.isfinite(self.trip_m) and self.trip_m >= 0):
            raise ValueError(f"offer {self.ev_id}: trip_m must be >= 0")
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ValueError(f"offer {self.ev_id}: delta must be >= 0")


@dataclass(frozen=True)
class MarketSnapshot:
    offers: tuple[SupplyOffer, ...]
    total_demand_Wh: float
    renewables_Wh: float
    grid: GridParams = field(default_factory=GridParams)

    def __post_init__(self):
        object.__setattr__(self, "offers", tuple(self.offers))
        if not (math.isfinite(self.total_demand_Wh) and self.total_demand_Wh >= 0):
            raise ValueError("total_demand_Wh must be >= 0")
        if not (math.isfinite(self.renewables_Wh) and self.renewables_Wh >= 0):
            raise ValueError("renewables_Wh must be >= 0")
        ids = [o.ev_id for o in self.offers]
        if len(set(ids)) != len(ids):
            raise ValueError("offer ids must be unique")

    def without_offers(self) -> "MarketSnapshot":
        return replace(self, offers=())

    def to_dict(self) -> dict:
        return {
            "offers": [asdict(o) for o in self.offers],
            "total_demand_Wh": self.total_demand_Wh,
            "renewables_Wh": self.renewables_Wh,
            "grid": asdict(self.grid),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketSnapshot":
        return cls(
            tuple(SupplyOffer(**o) for o in data.get("offers", [])),
            float(data["total_demand_Wh"]),
            float(data.get("renewables_Wh", 0.0)),
            GridParams(**data.get("grid", {})),
        )


@dataclass
class DispatchSolution:
    s_G_Wh: float
    accepted: dict[int, float]
    cost_C_G: float
    status: SolveStatus
    nodes_expanded: int = 0

    @property
    def accepted_total_Wh(self) -> float:
        return float(sum(self.accepted.values()))

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "s_G_Wh": self.s_G_Wh,
            "cost_C_G": self.cost_C_G,
            "accepted": {str(k): v for k, v in sorted(self.accepted.items())},
            "nodes_expanded": self.nodes_expanded,
        }

    @classmethod
    def infeasible(cls, nodes: int = 0) -> "DispatchSolution":
        return cls(math.nan, {}, math.inf, SolveStatus.INFEASIBLE, nodes)


# ---------------------------------------------------------------- cost and utility

def grid_cost(params: GridParams, s_G: float, accepted_total: float) -> float:
    """Generation plus emission penalty plus payments to EVs (Wh in, currency out)."""
    if s_G < 0 or accepted_total < 0:
        raise ValueError("energies must be >= 0")
    return params.grid_unit_cost * s_G + params.ev_unit_cost * accepted_total


def ev_utility(params: GridParams, offer: SupplyOffer, s_i: float) -> float:
    """Selling utility of an EV for supplying ``s_i`` Wh."""
    if not 0 <= s_i <= offer.offered_Wh * (1 + 1e-12):
        raise ValueError(f"s_i must be within [0, {offer.offered_Wh}]")
    x = s_i / params.unit_Wh
    travel = offer.delta * offer.trip_m / params.unit_Wh
    return (params.p_EV + params.beta) * x - travel - params.a * x * x - params.b * x


def utility_maximizer(params: GridParams, offer: SupplyOffer) -> float:
    """Volume (Wh) maximizing :func:`ev_utility`, clamped to the offer."""
    x = (params.p_EV + params.beta - params.b) / (2 * params.a)
    return min(max(x * params.unit_Wh, 0.0), offer.offered_Wh)


def feasible_supply_interval(params: GridParams, offer: SupplyOffer) -> tuple[float, float] | None:
    """Volumes (Wh) with utility at least ``u_min``, intersected with the offer.

    Returns ``None`` when no positive volume qualifies.
    """
    k = params.p_EV + params.beta - params.b
    c = offer.delta * offer.trip_m / params.unit_Wh + params.u_min
    if k <= 0:
        return None
    disc = k * k - 4 * params.a * c
    if disc < 0:
        return None
    root = math.sqrt(disc)
    lo = 2 * c / (k + root) * params.unit_Wh  # stable form of the smaller root
    hi = min((k + root) / (2 * params.a) * params.unit_Wh, offer.offered_Wh)
    if lo > hi:
        return None
    return lo, hi


def offer_bounds(snapshot: MarketSnapshot) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (lo, hi) of feasible intervals; empty intervals give lo = inf, hi = 0."""
    n = len(snapshot.offers)
    lo, hi = np.full(n, np.inf), np.zeros(n)
    for i, offer in enumerate(snapshot.offers):
        interval = feasible_supply_interval(snapshot.grid, offer)
        if interval is not None:
            lo[i], hi[i] = interval
    return lo, hi


def verify_net_zero(snapshot: MarketSnapshot, solution: DispatchSolution) -> float:
    """Supply minus demand minus losses (Wh); negative means under-supplied."""
    s_G = solution.s_G_Wh
    return (s_G + snapshot.renewables_Wh + solution.accepted_total_Wh
            - snapshot.total_demand_Wh - snapshot.grid.loss_fraction * s_G)


# ---------------------------------------------------------------- relaxation

FREE, ACTIVE, INACTIVE = 0, 1, -1


@dataclass
class Relaxation:
    feasible: bool
    bound: float
    s_G_Wh: float
    supplies: np.ndarray

    def fractional(self, lo: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Indices of free offers whose supply sits strictly inside (0, lo)."""
        s = self.supplies
        return np.flatnonzero((states == FREE) & (s > 0) & (s < lo * (1 - 1e-12)))


def _relax(grid: GridParams, need: float, lo: np.ndarray, hi: np.ndarray,
           states: np.ndarray, fill_order: np.ndarray) -> Relaxation:
    n = lo.size
    supplies = np.zeros(n)
    active = states == ACTIVE
    supplies[active] = lo[active]
    base = float(supplies.sum())
    rest = max(need - base, 0.0)
    g, e = grid.grid_delivered_cost, grid.ev_unit_cost
    grid_room = (1.0 - grid.loss_fraction) * grid.s_G_cap
    ev_room = float(np.sum(hi[active] - lo[active]) + np.sum(hi[states == FREE]))
    if rest > grid_room + ev_room * (1 + 1e-12) + 1e-9:
        return Relaxation(False, math.inf, math.nan, supplies)
    if e <= g:
        from_ev = min(rest, ev_room)
        from_grid = rest - from_ev
    else:
        from_grid = min(rest, grid_room)
        from_ev = rest - from_grid
    # Top up active offers first, then free ones in the fixed fill order.
    remaining = from_ev
    for i in fill_order:
        if remaining <= 0:
            break
        if states[i] == INACTIVE:
            continue
        take = min(hi[i] - supplies[i], remaining)
        supplies[i] += take
        remaining -= take
    s_G = min(from_grid / (1.0 - grid.loss_fraction), grid.s_G_cap)
    bound = grid.grid_unit_cost * s_G + e * float(supplies.sum())
    return Relaxation(True, bound, s_G, supplies)


def _fill_order(lo: np.ndarray, hi: np.ndarray, states: np.ndarray) -> np.ndarray:
    # Active offers first (their lower bound is already paid), then by size.
    key_active = (states != ACTIVE).astype(float)
    return np.lexsort((np.arange(lo.size), -hi, key_active))


def lp_relaxation(snapshot: MarketSnapshot, states: Sequence[int] | None = None,
                  bounds: tuple[np.ndarray, np.ndarray] | None = None) -> Relaxation:
    """Continuous relaxation of the dispatch problem at a search node.

    ``states[i]`` is ``FREE`` (supply in ``[0, hi]``), ``ACTIVE`` (in
    ``[lo, hi]``) or ``INACTIVE`` (fixed at 0). Offers with an empty interval
    are always treated as inactive. The result's ``bound`` is the exact
    optimum of the relaxed problem, hence a lower bound on every completion.
    """
    lo, hi = bounds if bounds is not None else offer_bounds(snapshot)
    n = lo.size
    st = np.zeros(n, dtype=np.int8) if states is None else np.asarray(states, dtype=np.int8).copy()
    st[hi <= 0] = INACTIVE
    need = snapshot.total_demand_Wh - snapshot.renewables_Wh
    return _relax(snapshot.grid, need, lo, hi, st, _fill_order(lo, hi, st))


def _solution(snapshot: MarketSnapshot, s_G: float, supplies: np.ndarray, nodes: int) -> DispatchSolution:
    accepted = {o.ev_id: float(s) for o, s in zip(snapshot.offers, supplies) if s > 0}
    total = float(sum(accepted.values()))
    return DispatchSolution(float(s_G), accepted, grid_cost(snapshot.grid, s_G, total),
                            SolveStatus.OPTIMAL, nodes)


# ---------------------------------------------------------------- branch and bound

def _pick_branch(candidates: np.ndarray, supplies: np.ndarray, lo: np.ndarray,
                 offered: np.ndarray) -> int:
    z = supplies[candidates] / lo[candidates]
    score = np.minimum(z, 1.0 - z)
    order = np.lexsort((candidates, -offered[candidates], -score))
    return int(candidates[order[0]])


def branch_and_bound_solve(snapshot: MarketSnapshot, log_path: str | Path | None = None) -> DispatchSolution:
    """Exact minimum-cost dispatch by depth-first branch and bound.

    Each node fixes some offers on (supply within the feasible interval) or
    off (supply 0). A node whose relaxation has no offer stuck strictly
    between 0 and its lower bound is feasible as it stands; otherwise the
    most fractional such offer (ties to the larger offer) is branched on,
    "on" child first. Nodes whose bound cannot beat the incumbent are pruned.

    With ``log_path`` set, one CSV row per expanded node is written.
    """
    lo, hi = offer_bounds(snapshot)
    n = lo.size
    offered = np.array([o.offered_Wh for o in snapshot.offers], dtype=float)
    need = snapshot.total_demand_Wh - snapshot.renewables_Wh
    root = np.zeros(n, dtype=np.int8)
    root[hi <= 0] = INACTIVE

    best_cost, best = math.inf, None
    stack = [(root, 0, -1)]
    nodes = 0
    log_rows = []
    while stack:
        states, depth, parent = stack.pop()
        node_id = nodes
        nodes += 1
        relax = _relax(snapshot.grid, need, lo, hi, states, _fill_order(lo, hi, states))
        tol = 1e-12 * max(1.0, abs(best_cost)) if math.isfinite(best_cost) else 0.0
        if not relax.feasible:
            action = "infeasible"
        elif relax.bound >= best_cost - tol:
            action = "pruned"
        else:
            frac = relax.fractional(lo, states)
            if frac.size == 0:
                best_cost, best = relax.bound, relax
                action = "incumbent"
            else:
                j = _pick_branch(frac, relax.supplies, lo, offered)
                off, on = states.copy(), states.copy()
                off[j], on[j] = INACTIVE, ACTIVE
                stack.append((off, depth + 1, node_id))
                stack.append((on, depth + 1, node_id))
                action = f"branch:{snapshot.offers[j].ev_id}"
        if log_path is not None:
            log_rows.append((node_id, parent, depth, relax.bound, best_cost, action))

    if log_path is not None:
        with Path(log_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "parent", "depth", "bound", "incumbent", "action"])
            writer.writerows(log_rows)
    if best is None:
        return DispatchSolution.infeasible(nodes)
    return _solution(snapshot, best.s_G_Wh, best.supplies, nodes)


# ---------------------------------------------------------------- exhaustive oracle

def brute_force_solve(snapshot: MarketSnapshot, chunk: int = 1 << 15) -> DispatchSolution:
    """Try every on/off subset of offers and keep the cheapest feasible one.

    For a fixed subset the remaining problem is a two-source linear fill with
    a closed form, evaluated for all subsets at once with numpy.
    """
    n = len(snapshot.offers)
    if n > MAX_BRUTE_FORCE_OFFERS:
        raise ValueError(f"brute force supports at most {MAX_BRUTE_FORCE_OFFERS} offers, got {n}")
    grid = snapshot.grid
    lo, hi = offer_bounds(snapshot)
    viable = hi > 0
    lo_v = np.where(viable, lo, 0.0)
    slack_v = np.where(viable, hi - lo_v, 0.0)
    need = snapshot.total_demand_Wh - snapshot.renewables_Wh
    g, e = grid.grid_delivered_cost, grid.ev_unit_cost
    keep = 1.0 - grid.loss_fraction
    grid_room = keep * grid.s_G_cap
    bits = 1 << np.arange(n, dtype=np.int64)

    best_cost, best_mask, best_parts = math.inf, None, None
    for start in range(0, 1 << n, chunk):
        masks = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        on = (masks[:, None] & bits[None, :]) != 0
        # Subsets that switch on an offer with an empty interval are never feasible.
        ok = ~np.any(on & ~viable[None, :], axis=1)
        base = on @ lo_v
        slack = on @ slack_v
        rest = np.maximum(need - base, 0.0)
        if e <= g:
            ev_extra = np.minimum(rest, slack)
            delivered = rest - ev_extra
            ok &= delivered <= grid_room * (1 + 1e-12) + 1e-9
        else:
            delivered = np.minimum(rest, grid_room)
            ev_extra = rest - delivered
            ok &= ev_extra <= slack * (1 + 1e-12) + 1e-9
        s_G = np.minimum(delivered / keep, grid.s_G_cap)
        cost = np.where(ok, grid.grid_unit_cost * s_G + e * (base + ev_extra), np.inf)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best_mask = float(cost[k]), int(masks[k])
            best_parts = (float(s_G[k]), float(ev_extra[k]))
    if best_mask is None:
        return DispatchSolution.infeasible()
    s_G, extra = best_parts
    supplies = np.zeros(n)
    for i in range(n):
        if best_mask >> i & 1:
            take = min(slack_v[i], extra)
            supplies[i] = lo_v[i] + take
            extra -= take
    return _solution(snapshot, s_G, supplies, 1 << n)


# ---------------------------------------------------------------- baselines and I/O

def no_optimization_cost(params: GridParams) -> float:
    """Cost of dispatching the full grid capacity with no prosumer purchases."""
    return grid_cost(params, params.s_G_cap, 0.0)


def accepted_fraction(snapshot: MarketSnapshot, solution: DispatchSolution) -> float:
    """Accepted volume over the largest volume the viable offers could supply."""
    _, hi = offer_bounds(snapshot)
    total = float(hi.sum())
    if total <= 0 or solution.status is not SolveStatus.OPTIMAL:
        return math.nan
    return solution.accepted_total_Wh / total


def save_json(obj: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_snapshot(path: str | Path) -> MarketSnapshot:
    return MarketSnapshot.from_dict(json.loads(Path(path).read_text()))
