"""Config-driven end-to-end runs; each returns a metrics dict for the report."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ctlab import coverage as cov
from ctlab import deanon
from ctlab.config import ScenarioConfig
from ctlab.isolation import collect_contacts, collect_sessions, run_isolation
from ctlab.pollution import (
    AttackerSpec,
    PollutionScenario,
    interaction_cost,
    remote_sites_scenario,
    run_pollution,
)
from ctlab.report import RunReport
from ctlab.server import CENTRALIZED, ExposureServer
from ctlab.world import BT, WIFI, ConfigError, run_population
from ctlab.world.sim import build_devices, run_world

DEFAULT_P_GRID = (0.0, 0.05, 0.1, 0.2, 0.3)
DEFAULT_R_GRID = (1.0, 2.0, 5.0, 10.0)


def simulate(cfg: ScenarioConfig) -> dict:
    if cfg.world is not None:
        log = run_world(cfg.world, cfg.seed)
    else:
        log = run_population(cfg.table6, cfg.seed)
    events = cfg.attack.get("events")
    if events:
        log.to_csv(cfg.resolve(events))
    return {
        "events": len(log),
        "bt_events": int((log.kind == BT).sum()),
        "wifi_events": int((log.kind == WIFI).sum()),
        "distinct_codes": len(log.codes),
        "distinct_tags": len(log.tags),
        "event_log_sha256": log.digest(),
    }


def isolation(cfg: ScenarioConfig) -> dict:
    a = cfg.attack
    world = cfg.world
    devices = build_devices(world, cfg.seed)
    by_name = {d.name: d for d in devices}
    log = run_world(world, cfg.seed, devices=devices)
    attacker_ids = [by_name[n].device_id for n in a["attackers"]]
    items = (collect_sessions(attacker_ids, log) if a.get("sessions", True)
             else collect_contacts(attacker_ids, log))
    server = ExposureServer(mode=a.get("mode", CENTRALIZED),
                            firewall_threshold=int(a.get("firewall_threshold", 10)))
    end_day = world.clock.day_index(world.start_time + world.duration)
    for name in a.get("diagnosed", []):
        server.issue_covidcode(f"covid-{name}")
        server.report_positive(by_name[name], f"covid-{name}", current_day=end_day)
    result = run_isolation(items, int(a.get("pools", 10)), server,
                           rounds_max=int(a.get("rounds_max", 64)),
                           rotate=bool(a.get("rotate_sources", True)))
    if a.get("sessions", True):
        identified = [s.label for s in result.identified]
    else:
        identified = sorted({devices[log.owner_of(c)].label for c in result.identified
                             if log.owner_of(c) is not None})
    return {
        "contacts": len(items),
        "pools": int(a.get("pools", 10)),
        "rounds": result.rounds_used,
        "accounts": result.accounts_used,
        "identified": identified,
        "identified_codes": sorted(c.hex() for c in result.identified_codes()),
        "ambiguous": len(result.ambiguous),
        "partial": result.partial,
    }


def pollution(cfg: ScenarioConfig) -> dict:
    a = cfg.attack
    if "sites" in a:
        scenario = remote_sites_scenario(
            int(a["sites"]), int(a.get("victims_per_site", 1)),
            float(a.get("site_distance", 1000.0)), a.get("extender_range"),
            float(a.get("duration", 60.0)), cfg.seed)
    else:
        specs = [AttackerSpec(x) if isinstance(x, str) else AttackerSpec(**x) for x in a["attackers"]]
        scenario = PollutionScenario(cfg.world, specs, list(a.get("diagnosed", [])), cfg.seed,
                                     slot_ms=int(a.get("slot_ms", 400)),
                                     max_interval_ms=int(a.get("max_interval_ms", 4000)))
    report = run_pollution(None, scenario, ExposureServer())
    return {
        "injected_records": report.injected_records,
        "false_notifications": report.false_notifications,
        "interactions": interaction_cost(report.injected_records),
        "replay_only": report.replay_only,
        "concentrator_codes": report.concentrator_codes,
        "dropped_for_capacity": report.dropped_for_capacity,
        "per_victim": {
            name: {"notified": v.notified, "false_notification": v.false_notification,
                   "injected": v.injected, "matched": v.matched, "genuine": v.genuine}
            for name, v in sorted(report.per_victim.items())
        },
    }


def _seed_list(cfg, a):
    k = int(a.get("seeds", 10))
    if k < 1:
        raise ConfigError("attack.seeds: must be >= 1")
    return [cfg.seed + i for i in range(k)]


def deanonymize(cfg: ScenarioConfig) -> dict:
    a = cfg.attack
    seeds = _seed_list(cfg, a)
    workers = int(a.get("workers", 1))
    if a.get("sweep"):
        points = deanon.sweep_detection_rate(a["sweep"], [float(v) for v in a["values"]],
                                             cfg.table6, seeds, workers)
        if a.get("curve"):
            with open(cfg.resolve(a["curve"]), "w", newline="") as fp:
                deanon.write_curve(points, fp)
        return {
            "sweep": a["sweep"],
            "seeds": seeds,
            "curve": [{"param_value": p.value, "mean_rate": p.mean_rate, "stddev": p.stddev,
                       "outcomes": dict(sorted(p.outcomes.items()))} for p in points],
        }
    runs = [deanon.run_detection(cfg.table6, s) for s in seeds]
    rates = [r.score.detection_rate for r in runs]
    totals = {k: sum(r.score.count(k) for r in runs)
              for k in (deanon.IDENTIFIED, deanon.AMBIGUOUS, deanon.MISSED)}
    return {
        "seeds": seeds,
        "detection_rates": rates,
        "detection_rate": float(np.mean(rates)),
        "detection_rate_stddev": float(np.std(rates)),
        "outcomes": totals,
        "pairs": [r.pairs for r in runs],
        "false_identifications": sum(r.score.false_identifications for r in runs),
    }


def coverage(cfg: ScenarioConfig) -> dict:
    a = cfg.attack
    if a.get("fixture"):
        if a["fixture"] != "houston":
            raise ConfigError(f"attack.fixture: unknown fixture {a['fixture']!r}")
        records = cov.houston_like(seed=cfg.seed)
        city = a.get("city", cov.HOUSTON["city"])
        population = int(a.get("population", cov.HOUSTON["population"]))
    else:
        records = cov.load_poi_csv(cfg.resolve(a["poi"]))
        city = a.get("city")
        if city is None:
            raise ConfigError("attack.city: required with a POI file")
        population = int(a["population"])
    p_grid = [float(x) for x in a.get("overlap_grid", DEFAULT_P_GRID)]
    r_grid = [float(x) for x in a.get("radius_grid", DEFAULT_R_GRID)]
    matrix = cov.coverage_sweep(records, city, population, p_grid, r_grid)
    if a.get("matrix"):
        Path(cfg.resolve(a["matrix"])).write_text(matrix_csv(matrix, p_grid, r_grid))
    in_city = cov.city_records(records, city)
    return {
        "city": city,
        "population": population,
        "records": len(in_city),
        "overlap_grid": p_grid,
        "radius_grid_km": r_grid,
        "coverage": matrix.tolist(),
        "day_overlap": cov.day_overlap(in_city),
        "average_frequency": cov.average_frequency(in_city),
    }


def matrix_csv(matrix, p_grid, r_grid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p\\r_km"] + [f"{r:g}" for r in r_grid])
    for p, row in zip(p_grid, matrix):
        w.writerow([f"{p:g}"] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


PIPELINES = {
    "simulate": simulate,
    "isolation": isolation,
    "pollution": pollution,
    "deanon": deanonymize,
    "coverage": coverage,
}


def execute(cfg: ScenarioConfig) -> RunReport:
    metrics = PIPELINES[cfg.kind](cfg)
    return RunReport(kind=cfg.kind, scenario=cfg.name, scenario_hash=cfg.scenario_hash(),
                     seed=cfg.seed, metrics=metrics)
