"""Simulated devices, encounter records and the population parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ctlab.protocol import EncounterCode, KeySchedule
from ctlab.world.eventlog import Tag


class ConfigError(ValueError):
    """Scenario parameters are missing, inconsistent or out of range."""


@dataclass
class EncounterRecord:
    code: EncounterCode
    time: float
    distance: float
    dwell: float
    receiver: int
    last_seen: float = 0.0
    # ground truth only: the device that physically transmitted the first copy
    transmitter: int = -1
    # ground truth only: every device heard transmitting this code
    via: set[int] = field(default_factory=set)

    def observe(self, t: float, distance: float, max_gap: float) -> None:
        gap = t - self.last_seen
        if 0 < gap <= max_gap:
            self.dwell += gap
        self.last_seen = t
        self.distance = min(self.distance, distance)


@dataclass
class DeviceState:
    device_id: int
    pos: tuple[float, float] = (0.0, 0.0)
    speed: float = 1.0
    # (t, x, y) waypoints, linearly interpolated; a single point means static
    trajectory: list[tuple[float, float, float]] = field(default_factory=list)
    bt_rate: float = 5.0
    wifi_rate: float = 30.0
    tags: list[Tag] = field(default_factory=list)
    infected: bool = False
    keys: KeySchedule | None = None
    inbox: dict[bytes, EncounterRecord] = field(default_factory=dict)
    wifi_enabled: bool = True
    name: str = ""
    role: str = "user"
    bt_range: float | None = None
    encounter_count: int = 1
    # overrides the default "current own identifier" advert; returns the codes
    # to transmit at time t (empty list = silent this tick)
    advertiser: Callable[["DeviceState", float], list[EncounterCode]] | None = None

    @property
    def tag(self) -> Tag | None:
        """Tag carried by this device's probes (its home SSID), if probing."""
        if not self.wifi_enabled or not self.tags:
            return None
        return self.tags[0]

    @property
    def label(self) -> str:
        return self.name or str(self.device_id)

    def records(self) -> list[EncounterRecord]:
        return sorted(self.inbox.values(), key=lambda r: (r.time, r.code.id_bytes))

    def position_at(self, t: float) -> tuple[float, float]:
        if not self.trajectory:
            return self.pos
        ts = [w[0] for w in self.trajectory]
        return (float(np.interp(t, ts, [w[1] for w in self.trajectory])),
                float(np.interp(t, ts, [w[2] for w in self.trajectory])))


def _check_range(name, lo_hi, lo, hi):
    a, b = lo_hi
    if not (lo <= a <= b <= hi):
        raise ConfigError(f"{name} range {lo_hi} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class Table6Params:
    """Population-scale scenario parameters; field names follow the published parameter list."""

    population: int = 10000
    infection_rate: float = 0.01
    # two 16:00-18:00 windows, seconds since scenario start (day 0 00:00)
    time: tuple[tuple[float, float], ...] = ((57600.0, 64800.0), (144000.0, 151200.0))
    duration: tuple[float, float] = (30.0, 300.0)
    encounter_count: tuple[int, int] = (1, 5)
    tags: int = 12000
    infected_tags: int = 80
    wifi_frequency: tuple[float, float] = (15.0, 75.0)
    bt_frequency: tuple[float, float] = (3.0, 10.0)
    speed: tuple[float, float] = (1.0, 15.0)
    r_wifi: float = 50.0
    r_bt: float = 10.0
    # sensing sites each visit is drawn from; not among the published parameters
    sensors: int = 50000
    sensor_spacing: float = 1000.0
    scan_interval: float = 1.0
    # fixed values for infected devices only, e.g. {"encounter_count": 1}
    infected_overrides: tuple[tuple[str, float], ...] = ()
    unsafe: bool = False

    def __post_init__(self):
        if self.population < 0:
            raise ConfigError("population must be non-negative")
        if not 0 <= self.infection_rate <= 1:
            raise ConfigError("infection_rate must be in [0, 1]")
        if self.infected_count > self.population:
            raise ConfigError("infected count exceeds population")
        if self.infected_tags > self.tags:
            raise ConfigError("infected_tags exceeds tags")
        if self.tags < 0 or self.infected_tags < 0:
            raise ConfigError("tag counts must be non-negative")
        if self.sensors < 1:
            raise ConfigError("sensors must be >= 1")
        if not (0 < self.r_bt <= self.r_wifi):
            raise ConfigError("need 0 < r_bt <= r_wifi")
        if self.sensor_spacing <= 2 * self.r_wifi + 20:
            raise ConfigError("sensor_spacing too small: sensing sites would overlap")
        for lo, hi in self.time:
            if hi <= lo:
                raise ConfigError("empty time window")
        if not self.unsafe:
            _check_range("duration", self.duration, 30, 300)
            _check_range("encounter_count", self.encounter_count, 1, 5)
            _check_range("wifi_frequency", self.wifi_frequency, 15, 75)
            _check_range("bt_frequency", self.bt_frequency, 3, 10)
            _check_range("speed", self.speed, 1, 15)
        for key, value in self.infected_overrides:
            if key not in ("encounter_count", "wifi_frequency", "speed", "bt_frequency", "duration"):
                raise ConfigError(f"unknown infected override {key!r}")

    @property
    def infected_count(self) -> int:
        return int(round(self.population * self.infection_rate))

    @property
    def mean_speed(self) -> float:
        return (self.speed[0] + self.speed[1]) / 2

    def with_infected(self, **overrides) -> "Table6Params":
        merged = dict(self.infected_overrides)
        merged.update(overrides)
        return replace(self, infected_overrides=tuple(sorted(merged.items())))

    def override(self, key: str):
        return dict(self.infected_overrides).get(key)


def waypoints_from(spec: Sequence) -> list[tuple[float, float, float]]:
    return [(float(t), float(x), float(y)) for t, x, y in spec]
