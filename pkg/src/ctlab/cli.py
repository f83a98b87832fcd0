"""``ctlab`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  A report
is written only after the whole pipeline finished.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
import time
from pathlib import Path

from ctlab import pipelines
from ctlab.config import bundled_config, load_config, parse_config, tomllib
from ctlab.report import write_report
from ctlab.world.model import ConfigError

REPORT_DIR_ENV = "CTLAB_REPORT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("ctlab")

# subcommand -> attack kind
KINDS = {
    "simulate": "simulate",
    "isolate": "isolation",
    "pollute": "pollution",
    "deanon": "deanon",
    "sweep": "deanon",
    "coverage": "coverage",
}
# bundled scenario used when a world-based subcommand gets no --scenario
DEFAULT_SCENARIO = {"isolate": "isolation_triangle.toml", "pollute": "pollution_relay.toml"}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=Path, help="TOML scenario file")
    p.add_argument("--seed", type=int, help="root seed (required without --scenario)")
    p.add_argument("--report", type=Path, help=f"report path (default: ${REPORT_DIR_ENV}/<kind>-<hash>.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctlab", description="Contact-tracing attack lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run any scenario file")
    p.add_argument("config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("simulate", help="run the radio world and summarise the event log")
    _common(p)
    p.add_argument("--events", type=Path, help="write the event log as CSV")

    p = sub.add_parser("isolate", help="contact-isolation attack (pool testing)")
    _common(p)
    p.add_argument("--pools", type=int, help="simulated accounts per round")
    p.add_argument("--rounds-max", type=int)

    p = sub.add_parser("pollute", help="contact-pollution relay attack")
    _common(p)
    p.add_argument("--sites", type=int, help="number of sites in the remote-relay scenario")
    p.add_argument("--extender-range", type=float, help="attacker Bluetooth range in metres")
    p.add_argument("--duration", type=float, help="seconds of simulated time")

    for name, helptext in (("deanon", "tag-matching de-anonymisation"),
                           ("sweep", "detection-rate sweep over one parameter")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--sweep", dest="sweep_param", required=name == "sweep",
                       help="encounter_count | wifi_frequency | speed")
        p.add_argument("--values", type=_floats, required=name == "sweep")
        p.add_argument("--seeds", type=int, help="seeds per point")
        p.add_argument("--workers", type=int)
        p.add_argument("--curve", type=Path, help="CSV output for the sweep curve")

    p = sub.add_parser("coverage", help="POI coverage estimate")
    _common(p)
    p.add_argument("--poi", type=Path, help="POI CSV (default: synthetic Houston-like fixture)")
    p.add_argument("--city")
    p.add_argument("--population", type=int)
    p.add_argument("--overlap-grid", type=_floats)
    p.add_argument("--radius-grid", type=_floats)
    p.add_argument("--matrix", type=Path, help="CSV output for the coverage matrix")
    return parser


def _load_raw(path: Path) -> dict:
    try:
        with open(path, "rb") as fp:
            return tomllib.load(fp)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _abs(p):
    return str(Path(p).resolve()) if p is not None else None


def assemble(args) -> tuple[dict, Path]:
    """Scenario dict after applying command-line overrides, plus its base dir."""
    kind = KINDS[args.command]
    path = args.scenario
    if path is None and args.command in DEFAULT_SCENARIO and getattr(args, "sites", None) is None:
        path = bundled_config(DEFAULT_SCENARIO[args.command])
    if path is not None:
        raw = copy.deepcopy(_load_raw(path))
        base = path.parent
    else:
        if args.seed is None:
            raise ConfigError("seed: --seed is required without --scenario")
        raw = {"seed": args.seed, "attack": {"kind": kind}}
        base = Path.cwd()
    attack = raw.setdefault("attack", {"kind": kind})
    if attack.get("kind") != kind:
        raise ConfigError(f"attack.kind: scenario is {attack.get('kind')!r}, "
                          f"subcommand {args.command!r} needs {kind!r}")
    if args.seed is not None:
        raw["seed"] = args.seed

    def put(key, value):
        if value is not None:
            attack[key] = value

    if kind == "simulate":
        put("events", _abs(args.events))
    elif kind == "isolation":
        put("pools", args.pools)
        put("rounds_max", args.rounds_max)
    elif kind == "pollution":
        put("sites", args.sites)
        put("extender_range", args.extender_range)
        put("duration", args.duration)
        if "sites" in attack:
            # the remote-site scenario builds its own world
            raw.pop("world", None)
            for k in ("attackers", "diagnosed", "slot_ms", "max_interval_ms"):
                attack.pop(k, None)
        elif args.duration is not None and "world" in raw:
            raw["world"]["duration"] = args.duration
    elif kind == "deanon":
        put("sweep", args.sweep_param)
        put("values", args.values)
        put("seeds", args.seeds)
        put("workers", args.workers)
        put("curve", _abs(args.curve))
    elif kind == "coverage":
        put("poi", _abs(args.poi))
        put("city", args.city)
        put("population", args.population)
        put("overlap_grid", args.overlap_grid)
        put("radius_grid", args.radius_grid)
        put("matrix", _abs(args.matrix))
        if "poi" in attack:
            attack.pop("fixture", None)
        else:
            attack.setdefault("fixture", "houston")
    return raw, base


def report_path(args, report) -> Path | None:
    if args.report is not None:
        return args.report
    directory = os.environ.get(REPORT_DIR_ENV)
    if directory:
        return Path(directory) / f"{report.kind}-{report.scenario_hash[:12]}.json"
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                raw = copy.deepcopy(cfg.raw)
                raw["seed"] = args.seed
                cfg = parse_config(raw, cfg.base_dir)
        else:
            raw, base = assemble(args)
            cfg = parse_config(raw, base)
    except ConfigError as exc:
        print(f"ctlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    started = time.perf_counter()
    try:
        report = pipelines.execute(cfg)
    except ConfigError as exc:
        print(f"ctlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("pipeline failed", exc_info=True)
        print(f"ctlab: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - started

    path = report_path(args, report)
    try:
        if path is None:
            sys.stdout.write(report.to_json())
        else:
            write_report(report, path, wall_clock=elapsed)
            print(path)
    except OSError as exc:
        print(f"ctlab: cannot write report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
