"""Command-line interface: run, serve, analyze, replay."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from ..analytics import (
    count_series,
    density_grid,
    penetration_rate,
    penetration_rate_in_controlled_lanes,
    trajectory_plot_data,
    write_counts_csv,
    write_density_csv,
    write_plot_jsonl,
)
from ..road import Corridor
from ..server import FleetHttpServer, FleetState, ServerConfig, WallClock
from .replay import IntegrityError, replay
from .scenario import build_scenario, bundled_scenario_path, load_scenario
from .simulate import RunAborted, run


def _load_cli_scenario(args) -> "ScenarioConfig":
    path = Path(args.config) if args.config else bundled_scenario_path(args.scenario)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    return build_scenario(doc)


def _cmd_run(args) -> int:
    scenario = _load_cli_scenario(args)
    log = run(scenario, args.out, port=args.port, pace=args.pace)
    print(f"run complete: {log.ticks} ticks, {log.messages} wire messages")
    print(f"scenario hash {log.scenario_hash}")
    print(f"log written to {log.out_dir}")
    return 0


def _cmd_serve(args) -> int:
    cfg = ServerConfig()
    if args.config:
        scenario = load_scenario(args.config)
        cfg = ServerConfig(
            heartbeat_timeout_s=scenario.timings.heartbeat_timeout,
            staleness_threshold_s=scenario.server.staleness_threshold_s,
            low_battery_v=scenario.server.low_battery_v,
            relay_ttl_s=scenario.server.relay_ttl_s,
            testbed_start_mm=scenario.corridor.testbed_start_mm,
            testbed_end_mm=scenario.corridor.testbed_end_mm,
            version_sets={sid: vs.hashes for sid, vs in scenario.version_sets.items()},
        )
    state = FleetState(cfg, WallClock(), log_dir=args.log)
    server = FleetHttpServer(state, host=args.host, port=args.port, assets_dir=args.assets)
    print(f"fleet server on http://{server.host}:{server.port} (log dir: {args.log})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        state.close()
    return 0


def _replay_for_analysis(args):
    data = replay(args.log)
    sc = data.scenario
    corridor = Corridor(**sc["corridor"])
    return data, corridor


def _cmd_analyze(args) -> int:
    if args.what == "penetration":
        control_rate = 3600.0 / args.control_period
        pct = penetration_rate(control_rate, args.flow) * 100.0
        print(f"penetration: {pct:.2f}% "
              f"(control rate {control_rate:.1f} veh/hr over {args.flow:g} veh/hr)")
        if args.lane_share is not None:
            lane_pct = penetration_rate_in_controlled_lanes(control_rate, args.flow, args.lane_share) * 100.0
            print(f"within controlled lanes (share {args.lane_share:g}): {lane_pct:.2f}%")
        return 0

    data, corridor = _replay_for_analysis(args)
    out_dir = Path(args.out) if args.out else Path(args.log) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.what == "density":
        grid = density_grid(
            data.telemetry_streams(), corridor, dx=args.dx, dt=args.dt,
            westbound_only=not args.all_traffic,
        )
        path = out_dir / "density.csv"
        write_density_csv(grid, path)
        print(f"density grid {grid.cells.shape[0]}x{grid.cells.shape[1]} -> {path}")
    elif args.what == "counts":
        series = count_series(data.telemetry_streams(), corridor, window=args.window)
        path = out_dir / "counts.csv"
        write_counts_csv(series, path)
        print(f"count series ({len(series.series_on)} windows) -> {path}")
    elif args.what == "plotdata":
        points = trajectory_plot_data(data.state_streams())
        path = out_dir / "plotdata.jsonl"
        write_plot_jsonl(points, path)
        print(f"{len(points)} trajectory points -> {path}")
    return 0


def _cmd_replay(args) -> int:
    data = replay(args.log)
    n_records = sum(len(s) for s in data.telemetry.values())
    print(f"log verified: scenario {data.scenario['name']!r} hash {data.scenario_hash[:12]}...")
    print(f"{len(data.telemetry)} telemetry streams, {n_records} records, "
          f"{len(data.states)} state ticks, {len(data.messages)} wire messages")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetsim",
                                     description="Desk-scale mixed-autonomy fleet testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario against the embedded server")
    p_run.add_argument("--config", help="scenario YAML file")
    p_run.add_argument("--scenario", default="ring", help="bundled scenario name (ring, corridor)")
    p_run.add_argument("--out", required=True, help="run-log output directory")
    p_run.add_argument("--port", type=int, default=None,
                       help="embedded server port (default: $FLEETSIM_PORT or ephemeral)")
    p_run.add_argument("--pace", type=float, default=0.0,
                       help="real-time pacing factor (0 = free run)")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.set_defaults(func=_cmd_run)

    p_serve = sub.add_parser("serve", help="standalone fleet server (for the dashboard)")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=int(os.environ.get("FLEETSIM_PORT", "8080")))
    p_serve.add_argument("--log", required=True, help="durable log directory")
    p_serve.add_argument("--config", help="scenario YAML supplying server tuning")
    p_serve.add_argument("--assets", help="static assets directory to serve at /")
    p_serve.set_defaults(func=_cmd_serve)

    p_an = sub.add_parser("analyze", help="density / counts / penetration / plotdata")
    p_an.add_argument("what", choices=["density", "counts", "penetration", "plotdata"])
    p_an.add_argument("--log", help="run-log directory (density/counts/plotdata)")
    p_an.add_argument("--out", help="output directory (default: <log>/analysis)")
    p_an.add_argument("--dx", type=float, default=0.1, help="space bin, miles")
    p_an.add_argument("--dt", type=float, default=300.0, help="time bin, seconds")
    p_an.add_argument("--window", type=float, default=300.0, help="count window, seconds")
    p_an.add_argument("--all-traffic", action="store_true",
                      help="density over both mainline directions (default: westbound only)")
    p_an.add_argument("--control-period", type=float,
                      help="seconds between passing control vehicles (penetration)")
    p_an.add_argument("--flow", type=float, help="total flow, veh/hr (penetration)")
    p_an.add_argument("--lane-share", type=float, default=None,
                      help="flow share of the controlled lanes (penetration)")
    p_an.set_defaults(func=_cmd_analyze)

    p_rep = sub.add_parser("replay", help="verify a run log and summarize its contents")
    p_rep.add_argument("--log", required=True)
    p_rep.set_defaults(func=_cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "analyze" and args.what == "penetration":
        if args.control_period is None or args.flow is None:
            parser.error("analyze penetration requires --control-period and --flow")
        if args.control_period <= 0 or args.flow <= 0:
            parser.error("--control-period and --flow must be positive")
    if args.command == "analyze" and args.what != "penetration" and not args.log:
        parser.error(f"analyze {args.what} requires --log")
    try:
        return args.func(args)
    except (RunAborted, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
