"""Command-line interface: ``rangeloc <command> ...``.

Exit codes: 0 success, 2 invalid arguments or scenario, 3 initialization
failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import InitializationError, InvalidArgument, ScenarioError
from .outputs import write_montecarlo, write_run
from .scenario import load_scenario
from .simulation import monte_carlo, observability_report, replay_scenario, run_initialization, run_scenario
from .uwb_net import read_packet_log

EXIT_SCENARIO = 2
EXIT_INIT = 3

log = logging.getLogger("rangeloc")


def cmd_simulate(args) -> int:
    s = load_scenario(args.scenario)
    if args.mode:
        s = s.with_overrides(network={**s.network, "mode": args.mode})
    seed = s.seed if args.seed is None else args.seed
    out = Path(args.out)
    if args.runs <= 1:
        res = run_scenario(s, seed=seed)
        paths = write_run(res, out, figures=not args.no_figures)
        m = res.metrics
        print(f"scenario {s.name} seed {seed}: position RMSE {m.fleet_position_rmse():.4f} m, "
              f"heading RMSE {m.fleet_heading_rmse():.4f} rad, odometry final error "
              f"{m.final_error(baseline=True):.3f} m vs filter {m.final_error():.3f} m, gated {m.gated}")
        print(f"wrote {len(paths)} files to {out}")
        return 0
    seeds = [seed + k for k in range(args.runs)]
    workers = args.workers or min(len(seeds), os.cpu_count() or 1)
    rows = monte_carlo(s, seeds, workers)
    out.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(rows):
        r["run"] = k
    write_montecarlo(rows, out)
    ok = [r for r in rows if r["status"] == "ok"]
    print(f"{len(ok)}/{len(rows)} runs completed")
    if ok:
        dom = sum(r["final_error"] < r["odo_final_error"] for r in ok)
        print(f"final error below odometry in {dom}/{len(ok)} runs")
        print(f"median position RMSE {np.median([r['position_rmse'] for r in ok]):.4f} m")
        if not args.no_figures:
            from .plotting import render_ensemble_figure
            render_ensemble_figure(ok[0]["times"], np.mean([r["mean_error"] for r in ok], axis=0),
                                   np.mean([r["mean_odo_error"] for r in ok], axis=0), out / "ensemble.png",
                                   f"{s.name}: mean over {len(ok)} runs")
    return 0 if len(ok) == len(rows) else EXIT_INIT


def cmd_observability(args) -> int:
    s = load_scenario(args.scenario, min_vehicles=2)
    at = "initial" if args.time is None else args.time
    rep = observability_report(s, at=at)
    print(f"regime: {rep.regime}")
    print(f"measured rank: {rep.rank} of {rep.columns}")
    print(f"predicted rank: {rep.predicted_rank if rep.predicted_rank is not None else 'n/a'}")
    print(f"verdict: {rep.verdict}")
    return 0


def cmd_replay(args) -> int:
    s = load_scenario(args.scenario)
    frames = read_packet_log(args.packet_log)
    res = replay_scenario(s, frames)
    res.packets = None
    out = Path(args.out)
    write_run(res, out, figures=not args.no_figures)
    print(f"replayed {len(frames)} frames: position RMSE {res.metrics.fleet_position_rmse():.4f} m")
    return 0


def cmd_init_demo(args) -> int:
    s = load_scenario(args.scenario)
    rep = run_initialization(s, seed=args.seed)
    for line in rep.summary_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rangeloc", description="Range-only collaborative localization simulator")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run a scenario and write CSVs, a gnuplot script and figures")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sp.add_argument("--runs", type=int, default=1, help="Monte Carlo runs with seeds seed, seed+1, ...")
    sp.add_argument("--out", default="out", help="output directory (default: out)")
    sp.add_argument("--workers", type=int, default=0, help="processes for --runs (default: CPU count)")
    sp.add_argument("--mode", choices=["direct", "uwb"], default=None, help="override network.mode")
    sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("observability", help="rank of the observability matrix for a scenario")
    sp.add_argument("scenario")
    sp.add_argument("--time", type=float, default=None, help="evaluate at this time instead of the initial poses")
    sp.set_defaults(func=cmd_observability)

    sp = sub.add_parser("replay", help="re-run the pipeline on a recorded packet log")
    sp.add_argument("packet_log")
    sp.add_argument("scenario")
    sp.add_argument("--out", default="out_replay")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("init-demo", help="run only the initialization phases and print the report")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_init_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT


if __name__ == "__main__":
    sys.exit(main())
