"""Command-line entry points.

Subcommands: ``simulate`` (closed loop, writes logs), ``replay`` (NDJSON
back onto a bus), ``evaluate`` (metrics over recorded runs), ``fit-fd``
(diagram identification from samples), ``serve`` (closed loop with the
dashboard gateway).  Exit codes: 0 success, 1 configuration error, 2
runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bus import Bus, NonMonotoneTimestamps, read_event_log, replay, write_event_log
from .events import MalformedEvent
from .fd_estimation import estimate_capacity_drop, estimate_critical_density, gp_fit, default_1d_hyperparams
from .metrics import (
    MetricsReport,
    compute_tft,
    compute_tts,
    load_annotations,
    precision_recall,
    relative_savings,
)
from .runtime import ClosedLoopRuntime, MODES
from .scenario import ScenarioConfig, annotated_scenario, corridor_scenario
from .simulator import Trajectory


def _load_scenario(spec: str) -> ScenarioConfig:
    if spec.startswith("corridor"):
        return corridor_scenario()
    if spec.startswith("annotated"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return annotated_scenario(seed=seed)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"scenario not found: {spec}")
    return ScenarioConfig.load(path)


def write_trajectory_csv(path: Path, trajectory: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cell", "density", "flow"])
        for t in range(trajectory.horizon):
            for k in range(trajectory.densities.shape[1]):
                writer.writerow(
                    [t, k, f"{trajectory.densities[t, k]:.10g}", f"{trajectory.total_out[t, k]:.10g}"]
                )


def write_queue_csv(path: Path, trajectory: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ramp", "queue", "ramp_flow", "arrivals", "spill", "command"])
        for t in range(trajectory.horizon):
            for i in range(trajectory.queues.shape[1]):
                writer.writerow(
                    [
                        t,
                        i,
                        f"{trajectory.queues[t, i]:.10g}",
                        f"{trajectory.ramp_flows[t, i]:.10g}",
                        f"{trajectory.arrivals[t, i]:.10g}",
                        f"{trajectory.spill[t, i]:.10g}",
                        f"{trajectory.commands[t, i]:.10g}",
                    ]
                )


def save_run(out_dir: Path, config: ScenarioConfig, run, mode: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "scenario.json")
    write_event_log(out_dir / "events.ndjson", run.result.events)
    write_trajectory_csv(out_dir / "trajectory.csv", run.result.trajectory)
    write_queue_csv(out_dir / "queues.csv", run.result.trajectory)
    net = config.build_network()
    tts = compute_tts(run.result.trajectory, net)
    tft = compute_tft(run.result.trajectory, net)
    summary = {
        "mode": mode,
        "seed": config.seed,
        "horizon": run.result.trajectory.horizon,
        "tts_veh_h": tts,
        "tft_veh_h": tft,
        "spill_veh": run.spill_total,
        "queue_conflicts": run.queue_conflicts,
        "events": len(run.result.events),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def cmd_simulate(args) -> int:
    config = _load_scenario(args.scenario)
    if args.horizon:
        config.horizon = args.horizon
    if args.seed is not None:
        config.seed = args.seed
    runtime = ClosedLoopRuntime(config, mode=args.controller, hybrid=args.confirm)
    run = runtime.run()
    out_dir = Path(args.out_dir)
    save_run(out_dir, config, run, args.controller)
    summary = json.loads((out_dir / "summary.json").read_text())
    print(f"simulated {config.name} [{args.controller}] seed={config.seed}")
    print(f"  TTS = {summary['tts_veh_h']:.2f} veh*h, TFT = {summary['tft_veh_h']:.2f} veh*h")
    print(f"  spill = {summary['spill_veh']:.2f} veh, events = {summary['events']}")
    print(f"  outputs in {out_dir}")
    return 0


def cmd_replay(args) -> int:
    from .events import Topic

    bus = Bus()
    counts: dict[str, int] = {}
    for topic in Topic:
        bus.subscribe(topic, lambda e, t=topic: counts.__setitem__(t.value, counts.get(t.value, 0) + 1))
    n = replay(args.file, bus, realtime=args.realtime)
    print(f"replayed {n} events: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def _load_run(run_dir: Path) -> tuple[ScenarioConfig, Trajectory, list]:
    config = ScenarioConfig.load(run_dir / "scenario.json")
    net = config.build_network()
    rows = list(csv.DictReader(open(run_dir / "trajectory.csv")))
    horizon = max(int(r["step"]) for r in rows) + 1
    densities = np.zeros((horizon + 1, net.n_cells))
    total_out = np.zeros((horizon, net.n_cells))
    for r in rows:
        densities[int(r["step"]), int(r["cell"])] = float(r["density"])
        total_out[int(r["step"]), int(r["cell"])] = float(r["flow"])
    queues = np.zeros((horizon + 1, net.n_ramps))
    ramp_flows = np.zeros((horizon, net.n_ramps))
    arrivals = np.zeros((horizon, net.n_ramps))
    spill = np.zeros((horizon, net.n_ramps))
    commands = np.zeros((horizon, net.n_ramps))
    qpath = run_dir / "queues.csv"
    if qpath.exists() and net.n_ramps:
        for r in csv.DictReader(open(qpath)):
            t, i = int(r["step"]), int(r["ramp"])
            queues[t, i] = float(r["queue"])
            ramp_flows[t, i] = float(r["ramp_flow"])
            arrivals[t, i] = float(r["arrivals"])
            spill[t, i] = float(r["spill"])
            commands[t, i] = float(r["command"])
    summary = json.loads((run_dir / "summary.json").read_text())
    entry = np.zeros(horizon)
    # Entry flows are not in the CSVs; recompute TFT from the summary instead.
    trajectory = Trajectory(
        tick_hours=config.tick_hours,
        densities=densities,
        queues=queues,
        entry=entry,
        ramp_flows=ramp_flows,
        arrivals=arrivals,
        spill=spill,
        total_out=total_out,
        exit_out=np.zeros((horizon, net.n_cells)),
        commands=commands,
    )
    return config, trajectory, [summary]


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    config, trajectory, extras = _load_run(run_dir)
    net = config.build_network()
    summary = extras[0]
    tts = compute_tts(trajectory, net)
    tft = float(summary["tft_veh_h"])
    report = MetricsReport(tts=tts, tft=tft)

    if args.baseline_dir:
        base_summary = json.loads((Path(args.baseline_dir) / "summary.json").read_text())
        total, delay = relative_savings(float(base_summary["tts_veh_h"]), tts, tft)
        report.relative_savings_total = total
        report.relative_savings_delay = delay

    if args.annotations:
        events = read_event_log(run_dir / "events.ndjson")
        annotations = load_annotations(args.annotations)
        quality = precision_recall(events, annotations, certainty_threshold=args.certainty_threshold)
        report.precision = quality.precision
        report.recall = quality.recall
        report.mean_lead_time_min = quality.mean_lead_time_min

    (run_dir / "metrics.json").write_text(report.to_json())
    print(f"run: {run_dir}")
    print(f"  TTS  = {report.tts:10.2f} veh*h")
    print(f"  TFT  = {report.tft:10.2f} veh*h")
    if report.relative_savings_total is not None:
        print(f"  savings: total = {report.relative_savings_total:6.1%}, delay = {report.relative_savings_delay:6.1%}")
    if report.precision is not None:
        lead = f", mean lead = {report.mean_lead_time_min:.1f} min" if report.mean_lead_time_min else ""
        print(f"  detection: precision = {report.precision:.1%}, recall = {report.recall:.1%}{lead}")
    return 0


def cmd_fit_fd(args) -> int:
    rows = list(csv.DictReader(open(args.samples)))
    if not rows:
        print("no samples", file=sys.stderr)
        return 1
    out_prefix = Path(args.out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    if "rho_us" in rows[0]:
        triples = [(float(r["rho_us"]), float(r["rho_ds"]), float(r["flow"])) for r in rows]
        drop = estimate_capacity_drop(triples)
        result = {"capacity_drop": drop, "samples": len(triples)}
        print(f"estimated capacity drop: {drop:.4f}")
    else:
        pairs = [(float(r["rho"]), float(r["flow"])) for r in rows]
        fd = estimate_critical_density(pairs)
        result = {
            "critical_density": fd.critical_density,
            "jam_density": fd.jam_density,
            "capacity": fd.capacity,
            "free_flow_speed": fd.free_flow_speed,
            "samples": len(pairs),
        }
        print(
            f"critical density = {fd.critical_density:.1f} veh/km, "
            f"capacity = {fd.capacity:.0f} veh/h, jam = {fd.jam_density:.1f} veh/km"
        )
        rho = np.array([p[0] for p in pairs])
        phi = np.array([p[1] for p in pairs])
        model = gp_fit(rho, phi, default_1d_hyperparams(rho, phi))
        grid = np.arange(0.0, rho.max() + 0.5, 0.5)
        mean, lo, hi = model.predict_interval(grid[:, None])
        with open(f"{out_prefix}_grid.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["density", "flow_mean", "flow_lo90", "flow_hi90"])
            for g, m, l, h in zip(grid, mean, lo, hi):
                writer.writerow([f"{g:.1f}", f"{m:.3f}", f"{l:.3f}", f"{h:.3f}"])
    Path(f"{out_prefix}_summary.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .gateway import DashboardGateway

    config = _load_scenario(args.scenario)
    if args.horizon:
        config.horizon = args.horizon
    runtime = ClosedLoopRuntime(config, mode=args.controller, hybrid=args.confirm)
    if args.realtime:
        tick_s = config.tick_hours * 3600.0

        def pace(tick, snapshot):
            time.sleep(tick_s)

        runtime.on_tick = pace
    gateway = DashboardGateway(runtime, port=args.port)
    gateway.start()
    print(f"gateway listening on {gateway.host}:{gateway.port}")
    try:
        run = runtime.run()
    finally:
        gateway.stop()
    if args.out_dir:
        save_run(Path(args.out_dir), config, run, args.controller)
    print(f"run complete: {len(run.result.events)} events")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freeflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the closed loop and record logs")
    p.add_argument("--scenario", default="corridor", help="path to scenario.json, or corridor / annotated[:seed]")
    p.add_argument("--controller", choices=MODES, default="coordinated")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--confirm", action="store_true", help="hybrid mode: operator confirms coordination")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="publish a recorded NDJSON log onto a bus")
    p.add_argument("--file", required=True)
    p.add_argument("--realtime", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("evaluate", help="compute metrics over a recorded run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--baseline-dir", default=None, help="open-loop run for savings")
    p.add_argument("--annotations", default=None, help="episode CSV for precision/recall")
    p.add_argument("--certainty-threshold", type=float, default=0.6)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-fd", help="identify the fundamental diagram from samples")
    p.add_argument("--samples", required=True, help="CSV with rho,flow or rho_us,rho_ds,flow")
    p.add_argument("--out-prefix", default="fd_fit")
    p.set_defaults(func=cmd_fit_fd)

    p = sub.add_parser("serve", help="run the closed loop with the dashboard gateway")
    p.add_argument("--scenario", default="corridor")
    p.add_argument("--controller", choices=MODES, default="coordinated")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--port", type=int, default=8707)
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--confirm", action="store_true")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, MalformedEvent, NonMonotoneTimestamps) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
