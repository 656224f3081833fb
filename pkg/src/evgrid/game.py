"""Road-charge incentive game between EVs holding surplus energy.

Each EV either offers its surplus (cooperate) or not. While fewer than
``n_threshold`` players cooperate, a cooperator earns its selling utility and
everybody else pays the full road charge. Once the threshold is reached the
charge is shared: every player pays ``RC / n_coop`` whatever it did.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class Action(str, enum.Enum):
    COOP = "coop"
    NONCOOP = "noncoop"


@dataclass(frozen=True)
class Player:
    utility_if_coop: float
    has_surplus: bool = True


@dataclass(frozen=True)
class GameConfig:
    road_charge: float = 150.0
    n_threshold: int = 10
    players: tuple[Player, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "players", tuple(self.players))
        if not self.road_charge >= 0:
            raise ValueError("road_charge must be >= 0")
        if int(self.n_threshold) != self.n_threshold or self.n_threshold < 1:
            raise ValueError("n_threshold must be an integer >= 1")
        if not self.players:
            raise ValueError("a game needs at least one player")

    @classmethod
    def from_utilities(cls, utilities: Sequence[float], road_charge: float = 150.0,
                       n_threshold: int = 10, has_surplus: Sequence[bool] | None = None) -> "GameConfig":
        flags = [True] * len(utilities) if has_surplus is None else list(has_surplus)
        return cls(road_charge, n_threshold,
                   tuple(Player(float(u), bool(f)) for u, f in zip(utilities, flags)))

    @property
    def n_players(self) -> int:
        return len(self.players)


@dataclass(frozen=True)
class ActionProfile:
    actions: tuple[Action, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(Action(a) for a in self.actions))

    @property
    def n_coop(self) -> int:
        return sum(a is Action.COOP for a in self.actions)

    def validate(self, config: GameConfig) -> None:
        if len(self.actions) != config.n_players:
            raise ValueError("profile length does not match the number of players")
        for i, (a, p) in enumerate(zip(self.actions, config.players)):
            if a is Action.COOP and not p.has_surplus:
                raise ValueError(f"player {i} has no surplus and cannot cooperate")


def payoff(config: GameConfig, profile: ActionProfile, player_idx: int) -> float:
    profile.validate(config)
    if not 0 <= player_idx < config.n_players:
        raise IndexError(f"player index {player_idx} out of range")
    n_coop = profile.n_coop
    rc = config.road_charge
    if n_coop >= config.n_threshold:
        return -rc / n_coop
    if profile.actions[player_idx] is Action.COOP:
        return config.players[player_idx].utility_if_coop
    return -rc


def best_response(config: GameConfig, player_idx: int, others_actions: Sequence[Action]) -> Action:
    """Payoff-maximizing action against the other players' actions.

    ``others_actions`` lists every other player in index order. Ties go to
    cooperation.
    """
    if not config.players[player_idx].has_surplus:
        raise ValueError(f"player {player_idx} has no surplus to offer")
    if len(others_actions) != config.n_players - 1:
        raise ValueError("others_actions must cover every other player")
    others = list(others_actions)

    def value(action):
        actions = others[:player_idx] + [action] + others[player_idx:]
        return payoff(config, ActionProfile(tuple(actions)), player_idx)

    return Action.COOP if value(Action.COOP) >= value(Action.NONCOOP) else Action.NONCOOP


def conspiracy_threshold(road_charge: float, n_coop: int) -> float:
    """Smallest selling utility for which conspiring does not pay."""
    if n_coop < 1:
        raise ValueError("n_coop must be >= 1")
    return road_charge - road_charge / n_coop


def expected_conspiracy_gain(q: float, q_prime: float, n_threshold: int, utility: float,
                             road_charge: float, n_coop: int, use_q_prime: bool = True) -> float:
    """Expected payoff of playing honestly minus that of conspiring.

    ``q`` is the chance the player holds surplus and ``q_prime`` the chance
    the other threshold players know about it. ``use_q_prime=False`` raises
    ``q`` instead of ``q_prime`` to the threshold power.
    """
    for name, p in (("q", q), ("q_prime", q_prime)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name} must be in [0, 1]")
    if n_coop < 1:
        raise ValueError("n_coop must be >= 1")
    knowledge = (q_prime if use_q_prime else q) ** n_threshold
    return -q * knowledge * (utility - road_charge + road_charge / n_coop)


def participation_mask(utilities: Sequence[float], road_charge: float) -> np.ndarray:
    """Which surplus holders offer once conspiracy is ruled out.

    Every holder with non-negative utility would cooperate; an offer is kept
    when its utility also clears the conspiracy threshold for that many
    cooperators.
    """
    u = np.asarray(utilities, dtype=float)
    n_coop = int(np.sum(u >= 0))
    if n_coop == 0:
        return np.zeros(u.shape, dtype=bool)
    return u >= conspiracy_threshold(road_charge, n_coop)


@dataclass
class TournamentResult:
    n_coop: np.ndarray  # per round
    mean_payoff: np.ndarray  # per round
    cumulative_payoff: np.ndarray  # per player
    cooperation_rate: np.ndarray  # per player, share of rounds cooperating
    final_profile: ActionProfile

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "n_coop", "mean_payoff"])
            for r, (n, m) in enumerate(zip(self.n_coop, self.mean_payoff)):
                writer.writerow([r, int(n), f"{m:.9g}"])
        return path


def simulate_tournament(config: GameConfig, rounds: int, rng_seed: int = 0) -> TournamentResult:
    """Repeated simultaneous best responses to the previous round's profile.

    The opening profile is random for surplus holders (seeded); players
    without surplus never cooperate.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = config.n_players
    surplus = np.array([p.has_surplus for p in config.players])
    start = surplus & (rng.random(n) < 0.5)
    actions = [Action.COOP if c else Action.NONCOOP for c in start]
    n_coop = np.zeros(rounds, dtype=int)
    mean_payoff = np.zeros(rounds)
    cumulative = np.zeros(n)
    coop_count = np.zeros(n)
    for r in range(rounds):
        new = []
        for i in range(n):
            if not surplus[i]:
                new.append(Action.NONCOOP)
            else:
                new.append(best_response(config, i, actions[:i] + actions[i + 1:]))
        actions = new
        profile = ActionProfile(tuple(actions))
        pays = np.array([payoff(config, profile, i) for i in range(n)])
        cumulative += pays
        coop_count += np.array([a is Action.COOP for a in actions])
        n_coop[r] = profile.n_coop
        mean_payoff[r] = pays.mean()
    return TournamentResult(n_coop, mean_payoff, cumulative, coop_count / rounds,
                            ActionProfile(tuple(actions)))
