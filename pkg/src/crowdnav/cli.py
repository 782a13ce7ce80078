"""Command-line harness: run single episodes, benchmark seed ranges, export traces.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from crowdnav.prediction.external import PredictionProtocolError
from crowdnav.sicnav import MpcConfig, SicnavController
from crowdnav.sim import (Predictor, SeedInfeasibleError, TraceFormatError, aggregate_metrics,
                          generate_corridor, read_trace, run_episode, scenario_from_dict)
from crowdnav.sim.metrics import TABLE_HEADER

log = logging.getLogger("crowdnav")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
CONTROLLERS = ("sicnav-cvg", "sicnav-samples", "mpc-cvmm")
# predictors each controller variant accepts; the first entry is the default
COMPATIBLE = {
    "sicnav-cvg": ("cvg",),
    "sicnav-samples": ("mixture", "external"),
    "mpc-cvmm": ("cvmm",),
}
DEFAULT_SAMPLES = {"cvg": 1, "cvmm": 1, "mixture": 9, "external": 9}
# keys fixed by the scenario or the controller variant
_RESERVED = {"goal", "obstacles", "mode"}


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class RunSpec:
    controller: str = "sicnav-cvg"
    predictor: str = "cvg"
    endpoint: Optional[str] = None
    humans: int = 3
    seeds: tuple = (0,)
    overrides: dict = field(default_factory=dict)
    out: Path = Path("out")
    workers: int = 1
    verbose: bool = False

    @property
    def mode(self) -> str:
        return "frozen_predictions" if self.controller == "mpc-cvmm" else "bilevel"

    def mpc_overrides(self) -> dict:
        return {k: v for k, v in self.overrides.items() if not k.startswith(("predictor.", "scenario."))}

    def option(self, key: str, default=None):
        return self.overrides.get(key, default)


# -- configuration -------------------------------------------------------------
def _coerce(current, value, key):
    """Match an override to the type of the field it replaces."""
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    if isinstance(current, bool) or isinstance(current, str):
        if type(value) is not type(current):
            raise ConfigError(f"{key}: expected a {type(current).__name__}")
        return value
    if isinstance(current, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        if isinstance(current, int):
            if float(value) != int(value):
                raise ConfigError(f"{key}: expected an integer")
            return int(value)
        return float(value)
    return value


def _set_path(obj, path, value, key):
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"unknown configuration key {key!r}")
    names = {f.name for f in dataclasses.fields(obj)}
    if path[0] not in names:
        raise ConfigError(f"unknown configuration key {key!r}")
    current = getattr(obj, path[0])
    if len(path) == 1:
        new = _coerce(current, value, key)
    else:
        new = _set_path(current, path[1:], value, key)
    try:
        return dataclasses.replace(obj, **{path[0]: new})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def apply_overrides(config: MpcConfig, overrides: dict) -> MpcConfig:
    """Apply flat dotted-key overrides (``solver.max_iter``, ``orca.time_horizon``...)."""
    for key in sorted(overrides):
        path = key.split(".")
        if path[0] in _RESERVED:
            raise ConfigError(f"{key!r} is set by the scenario or controller variant")
        config = _set_path(config, path, overrides[key], key)
    return config


def parse_config_args(items) -> dict:
    """Merge ``--config`` items: JSON files of flat dotted keys, or inline ``key=value``."""
    out: dict = {}
    for item in items or ():
        path = Path(item)
        if "=" in item and not path.exists():
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            out[key.strip()] = value
            continue
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {item} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{item}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{item}: expected a JSON object of dotted keys")
        out.update(data)
    return out


def build_spec(args) -> RunSpec:
    controller = args.controller
    allowed = COMPATIBLE[controller]
    predictor = args.predictor or allowed[0]
    if predictor not in allowed:
        raise UsageError(f"controller {controller} cannot use predictor {predictor} "
                         f"(allowed: {', '.join(allowed)})")
    if predictor == "external" and not args.endpoint:
        raise UsageError("--predictor external needs --endpoint")
    if args.humans < 0:
        raise UsageError("--humans must be non-negative")
    if args.seed_range:
        try:
            lo, hi = (int(v) for v in args.seed_range.split(":"))
        except ValueError:
            raise UsageError("--seed-range expects START:STOP") from None
        if hi <= lo:
            raise UsageError("--seed-range must be non-empty")
        seeds = tuple(range(lo, hi))
    else:
        count = getattr(args, "count", 1)
        if count < 1:
            raise UsageError("--count must be at least 1")
        seeds = tuple(range(args.seed, args.seed + count))
    if getattr(args, "workers", 1) < 1:
        raise UsageError("--workers must be at least 1")
    spec = RunSpec(controller, predictor, args.endpoint, args.humans, seeds,
                   parse_config_args(args.config), Path(args.out), getattr(args, "workers", 1),
                   args.verbose)
    # validate everything once up front so workers never see a bad configuration
    apply_overrides(MpcConfig(mode=spec.mode), spec.mpc_overrides())
    for key in spec.overrides:
        if key.startswith(("predictor.", "scenario.")) and key not in (
                "predictor.num_samples", "predictor.noise_scale", "scenario.file", "scenario.timeout"):
            raise ConfigError(f"unknown configuration key {key!r}")
    return spec


def make_scenario(spec: RunSpec, seed: int):
    source = spec.option("scenario.file")
    if source is not None:
        try:
            sc = scenario_from_dict(json.loads(Path(source).read_text()))
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise ConfigError(f"scenario file {source}: {exc}") from None
        return dataclasses.replace(sc, seed=seed)
    timeout = float(spec.option("scenario.timeout", 30.0))
    try:
        return generate_corridor(seed, spec.humans, timeout=timeout)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_config(spec: RunSpec, scenario) -> MpcConfig:
    base = MpcConfig(goal=scenario.robot_goal, obstacles=scenario.walls, mode=spec.mode,
                     robot_radius=scenario.robot_radius)
    return apply_overrides(base, spec.mpc_overrides())


# -- episodes ------------------------------------------------------------------
def run_one(spec: RunSpec, seed: int, out_dir: Path) -> tuple:
    """One episode; writes its trace and result JSON. Returns (result, step_times)."""
    scenario = make_scenario(spec, seed)
    config = make_config(spec, scenario)
    num_samples = int(spec.option("predictor.num_samples", DEFAULT_SAMPLES[spec.predictor]))
    predictor = Predictor(spec.predictor, config.horizon, config.dt, num_samples, seed=seed,
                          endpoint=spec.endpoint,
                          noise_scale=float(spec.option("predictor.noise_scale", 0.05)))
    diag = open(out_dir / f"diagnostics_{seed}.jsonl", "w") if spec.verbose else None
    try:
        controller = SicnavController(config, log=diag)
        result = run_episode(scenario, controller, predictor, dt=config.dt,
                             trace_path=out_dir / f"trace_{seed}.jsonl")
    finally:
        predictor.close()
        if diag is not None:
            diag.close()
    (out_dir / f"result_{seed}.json").write_text(json.dumps(result.summary(), sort_keys=True) + "\n")
    return result, list(result.step_times)


def _summary_line(r) -> str:
    nav = f"{r.nav_time:.2f} s" if r.success else "-"
    return (f"seed {r.seed}: {'success' if r.success else 'failure'} nav_time {nav} "
            f"collisions {r.collision_steps} frozen {r.frozen_steps} steps {r.total_steps}")


def _timing_text(times) -> str:
    if not times:
        return "timing (wall clock): no control steps"
    ms = np.asarray(times) * 1e3
    return (f"timing (wall clock): median {np.median(ms):.1f} ms, "
            f"p95 {np.percentile(ms, 95):.1f} ms over {ms.size} control steps")


def cmd_run(spec: RunSpec) -> int:
    spec.out.mkdir(parents=True, exist_ok=True)
    for seed in spec.seeds:
        result, times = run_one(spec, seed, spec.out)
        print(_summary_line(result))
        log.info(_timing_text(times))
    return EXIT_OK


def _bench_worker(args):
    spec, seed, out_dir = args
    try:
        return seed, run_one(spec, seed, out_dir), None
    except (ConfigError, SeedInfeasibleError) as exc:
        return seed, None, str(exc)


def aggregate_document(spec: RunSpec, results) -> dict:
    metrics = aggregate_metrics(results)
    return {
        "controller": spec.controller,
        "predictor": spec.predictor,
        "humans": spec.humans,
        "seeds": [int(r.seed) for r in sorted(results, key=lambda r: r.seed)],
        "overrides": {k: spec.overrides[k] for k in sorted(spec.overrides)},
        "metrics": metrics.as_dict(),
    }


def cmd_bench(spec: RunSpec) -> int:
    ep_dir = spec.out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, seed, ep_dir) for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_bench_worker, jobs))
    else:
        outcomes = [_bench_worker(job) for job in jobs]
    failed = [(seed, err) for seed, _, err in outcomes if err is not None]
    done = [res for _, res, err in outcomes if err is None]
    if failed:
        marker = {"partial": True, "failed": [{"seed": s, "error": e} for s, e in failed],
                  "completed": sorted(r.seed for r, _ in done)}
        (spec.out / "PARTIAL.json").write_text(json.dumps(marker, indent=2, sort_keys=True) + "\n")
        for s, e in failed:
            log.error("seed %d: %s", s, e)
        return EXIT_CONFIG
    results = [r for r, _ in done]
    doc = aggregate_document(spec, results)
    (spec.out / "aggregate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    table = TABLE_HEADER + "\n" + aggregate_metrics(results).table_row(spec.controller) + "\n"
    (spec.out / "table.txt").write_text(table)
    times = [t for _, ts in done for t in ts]
    (spec.out / "timing.json").write_text(json.dumps({
        "note": "wall-clock timing, varies between runs",
        "median_ms": float(np.median(times) * 1e3) if times else None,
        "p95_ms": float(np.percentile(times, 95) * 1e3) if times else None,
        "steps": len(times)}, indent=2) + "\n")
    print(table, end="")
    log.info(_timing_text(times))
    return EXIT_OK


CSV_HEADER = ["step", "time", "agent", "x", "y", "vx", "vy", "heading"]


def export_rows(trace: list) -> list:
    """One row per step per agent; the robot comes first as agent ``robot``."""
    rows = []
    for rec in trace:
        x, y, th, sp = rec["robot"]
        rows.append([rec["step"], rec["time"], "robot", x, y, sp * math.cos(th), sp * math.sin(th), th])
        for j, (hx, hy, vx, vy) in enumerate(rec["humans"]):
            rows.append([rec["step"], rec["time"], f"human_{j}", hx, hy, vx, vy, ""])
    return rows


def cmd_export(trace_path: Path, out: Optional[Path]) -> int:
    trace = read_trace(trace_path)
    target = out if out is not None else trace_path.with_suffix(".csv")
    with open(target, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(export_rows(trace))
    print(f"wrote {target}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="first scenario seed")
    p.add_argument("--seed-range", help="START:STOP seed range (overrides --seed/--count)")
    p.add_argument("--humans", type=int, default=3)
    p.add_argument("--controller", choices=CONTROLLERS, default="sicnav-cvg")
    p.add_argument("--predictor", choices=("cvg", "cvmm", "mixture", "external"))
    p.add_argument("--endpoint", help="tcp://host:port or exec:command for the external predictor")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", action="append",
                   help="JSON file of dotted keys, or an inline key=value override (repeatable)")
    p.add_argument("--verbose", action="store_true", help="log timings and per-step diagnostics")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdnav", description="Crowd navigation experiments")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    run = sub.add_parser("run", help="run episodes and write their traces")
    _common(run)
    run.add_argument("--count", type=int, default=1)
    bench = sub.add_parser("bench", help="benchmark a seed range and aggregate metrics")
    _common(bench)
    bench.add_argument("--count", type=int, default=10)
    bench.add_argument("--workers", type=int, default=1)
    export = sub.add_parser("export", help="convert a JSONL trace to CSV")
    export.add_argument("trace")
    export.add_argument("--out", help="CSV path (default: trace path with .csv)")
    export.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command is None:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "export":
            return cmd_export(Path(args.trace), Path(args.out) if args.out else None)
        spec = build_spec(args)
        return cmd_run(spec) if args.command == "run" else cmd_bench(spec)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SeedInfeasibleError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        print(f"{args.trace}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, PredictionProtocolError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
