"""Command-line entry point: ``evgrid <simulate|optimize|bounds|game|sweep>``.

Exit codes: 0 success, 1 invalid configuration or input, 2 infeasible
market, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .bounds import write_bounds_csv
from .game import GameConfig, simulate_tournament
from .mobility import CLASSES, write_trace_csv
from .optimizer import InfeasibleError, SolveStatus, branch_and_bound_solve, load_snapshot, save_json

log = logging.getLogger("evgrid")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3


def _out_dir(args, config) -> Path:
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, config) -> int:
    return config.rng_seed if args.seed is None else args.seed


def cmd_simulate(args, config) -> int:
    seed = _seed(args, config)
    state, world = harness.simulate_fleet(config, seed, keep_world=True)
    report = harness.solve_round(config, state, config.grid)
    out = _out_dir(args, config)
    save_json(report.to_dict(), out / "round.json")
    if args.verbose:
        write_trace_csv(world, out / "traffic_trace.csv")
    print(json.dumps({k: v for k, v in report.row().items()}, default=float))
    return EXIT_OK


def cmd_optimize(args, config) -> int:
    if args.snapshot:
        snapshot = load_snapshot(args.snapshot)
    else:
        state = harness.simulate_fleet(config, _seed(args, config))
        snapshot = harness.build_market(config, state, config.grid).snapshot
    out = _out_dir(args, config)
    save_json(snapshot.to_dict(), out / "snapshot.json")
    solution = branch_and_bound_solve(snapshot, log_path=out / "search_log.csv" if args.verbose else None)
    save_json(solution.to_dict(), out / "solution.json")
    print(json.dumps(solution.to_dict()))
    if solution.status is not SolveStatus.OPTIMAL:
        raise InfeasibleError("no feasible dispatch", snapshot)
    return EXIT_OK


def cmd_bounds(args, config) -> int:
    table = harness.bound_table(config, config.n_ev)
    sims = {c: ([], []) for c in CLASSES}
    for r in range(config.rounds):
        state = harness.simulate_fleet(config, harness.repetition_seed(_seed(args, config), r))
        for k, c in enumerate(CLASSES):
            sims[c][0].append(float(state.supply_Wh[state.classes == k].sum()))
            sims[c][1].append(float(state.demand_Wh[state.classes == k].sum()))
    rows = [{"class": c.value, "S_UB_Wh": float(table[c][0]), "D_UB_Wh": float(table[c][1]),
             "sim_supply_Wh": float(np.mean(sims[c][0])), "sim_demand_Wh": float(np.mean(sims[c][1]))}
            for c in CLASSES]
    path = write_bounds_csv(rows, _out_dir(args, config) / "bounds.csv")
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_game(args, config) -> int:
    state = harness.simulate_fleet(config, _seed(args, config))
    build = harness.build_market(config, state, config.grid)
    if build.holder_utility.size == 0:
        log.error("no vehicle holds surplus energy in this round")
        return EXIT_CONFIG
    game = GameConfig.from_utilities(build.holder_utility, config.game.road_charge, config.game.n_threshold)
    result = simulate_tournament(game, config.game.tournament_rounds, _seed(args, config))
    path = result.write_csv(_out_dir(args, config) / "tournament.csv")
    print(f"players={game.n_players} final_coop={result.final_profile.n_coop} trace={path}")
    return EXIT_OK


def cmd_sweep(args, config) -> int:
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)

    def progress(cell, r):
        log.info("cell %s round %d/%d", cell.key, r + 1, config.rounds)

    table = harness.sweep(config, progress=progress if args.verbose else None)
    written = harness.export_results(table, _out_dir(args, config), config)
    for cell in table:
        print(json.dumps(cell.summary()))
    log.info("wrote %d files", len(written))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "bounds": cmd_bounds,
            "game": cmd_game, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config's rng_seed")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--verbose", action="store_true", help="extra logging and trace files")
    parser = argparse.ArgumentParser(prog="evgrid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="one market round")
    opt = sub.add_parser("optimize", parents=[common], help="solve a market snapshot")
    opt.add_argument("--snapshot", help="snapshot JSON to solve instead of simulating one")
    sub.add_parser("bounds", parents=[common], help="per-class bounds against simulation")
    sub.add_parser("game", parents=[common], help="repeated incentive game")
    sub.add_parser("sweep", parents=[common], help="parameter sweep with CSV export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = harness.load_config(args.config)
        if args.seed is not None and args.seed < 0:
            raise harness.ConfigError("--seed: must be >= 0")
        return COMMANDS[args.command](args, config)
    except InfeasibleError as exc:
        log.error("%s", exc)
        if exc.snapshot is not None:
            try:
                path = Path(args.out or ".") / "infeasible_snapshot.json"
                save_json(exc.snapshot.to_dict(), path)
                log.error("snapshot written to %s", path)
            except OSError:
                pass
        return EXIT_INFEASIBLE
    except (harness.ConfigError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
