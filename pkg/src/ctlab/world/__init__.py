"""Seeded radio-world simulation."""

from ctlab.world.eventlog import BT, WIFI, EventLog, RadioEvent, Tag
from ctlab.world.model import ConfigError, DeviceState, EncounterRecord, Table6Params
from ctlab.world.population import run_population, sample_population
from ctlab.world.sim import DeviceSpec, Simulator, WorldConfig, build_devices, run_world


def run_scenario(config, seed: int) -> EventLog:
    """Run either a placed-device world or a population scenario."""
    if isinstance(config, Table6Params):
        return run_population(config, seed)
    if isinstance(config, WorldConfig):
        return run_world(config, seed)
    raise ConfigError(f"unsupported scenario config {type(config).__name__}")


__all__ = [
    "BT", "WIFI", "ConfigError", "DeviceSpec", "DeviceState", "EncounterRecord", "EventLog",
    "RadioEvent", "Simulator", "Table6Params", "Tag", "WorldConfig", "build_devices",
    "run_population", "run_scenario", "run_world", "sample_population",
]
