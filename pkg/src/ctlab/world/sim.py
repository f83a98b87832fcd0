"""Fixed-tick simulation of a handful of placed devices.

Every tick (100 ms by default) each device may emit a BLE advert and/or a
WiFi probe; every other device inside the link radius receives it.  Links are
hard disks: a BT link e -> r works iff their distance is at most
``max(range(e), range(r))`` where a device's range is ``r_bt`` unless it
carries a long-range extender.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ctlab.protocol import DEFAULT_CLOCK, EpochClock, KeySchedule
from ctlab.world.eventlog import BT, WIFI, EventLog, EventLogBuilder, Tag
from ctlab.world.model import ConfigError, DeviceState, EncounterRecord, waypoints_from


@dataclass
class DeviceSpec:
    name: str
    pos: tuple[float, float] | None = None
    waypoints: Sequence | None = None
    bt_rate: float = 5.0
    wifi_rate: float = 30.0
    wifi_enabled: bool = True
    infected: bool = False
    role: str = "user"
    bt_range: float | None = None
    ssid: str | None = None


@dataclass
class WorldConfig:
    devices: list[DeviceSpec] = field(default_factory=list)
    duration: float = 60.0
    start_time: float = 0.0
    r_bt: float = 10.0
    r_wifi: float = 50.0
    tick: float = 0.1
    # receptions further apart than this do not add to dwell
    max_gap: float = 4.0
    clock: EpochClock = DEFAULT_CLOCK

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.r_bt <= 0 or self.r_wifi <= 0:
            raise ConfigError("radii must be positive")
        if self.tick <= 0:
            raise ConfigError("tick must be positive")
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            raise ConfigError("device names must be unique")


def random_mac(rng: np.random.Generator) -> int:
    mac = int(rng.integers(0, 1 << 48))
    # locally administered, unicast: what randomized addresses look like
    return (mac | (1 << 41)) & ~(1 << 40)


def build_devices(config: WorldConfig, seed: int) -> list[DeviceState]:
    root = np.random.SeedSequence(seed)
    key_seeds = root.spawn(len(config.devices) + 1)
    rng = np.random.default_rng(key_seeds[-1])
    devices = []
    for i, spec in enumerate(config.devices):
        if spec.waypoints:
            traj = waypoints_from(spec.waypoints)
            pos = traj[0][1:]
        elif spec.pos is not None:
            traj = []
            pos = (float(spec.pos[0]), float(spec.pos[1]))
        else:
            raise ConfigError(f"device {spec.name!r} needs pos or waypoints")
        if spec.bt_rate < 0 or spec.wifi_rate < 0:
            raise ConfigError(f"device {spec.name!r}: negative rate")
        devices.append(DeviceState(
            device_id=i,
            name=spec.name,
            pos=pos,
            trajectory=traj,
            bt_rate=spec.bt_rate,
            wifi_rate=spec.wifi_rate,
            wifi_enabled=spec.wifi_enabled,
            infected=spec.infected,
            role=spec.role,
            bt_range=spec.bt_range,
            tags=[Tag(random_mac(rng), spec.ssid or f"home-{spec.name}")],
            keys=KeySchedule(key_seeds[i], config.clock),
        ))
    return devices


def _emission_ticks(rate_hz: float, phase: float, n_ticks: int, dt: float) -> np.ndarray:
    if rate_hz <= 0:
        return np.zeros(0, dtype=np.int64)
    times = phase + np.arange(0, n_ticks * dt * rate_hz + 1) / rate_hz
    ticks = np.ceil(times / dt - 1e-9).astype(np.int64)
    return np.unique(ticks[ticks < n_ticks])


def poisson_times(rng: np.random.Generator, rate_hz: float, start: float, stop: float) -> np.ndarray:
    if rate_hz <= 0 or stop <= start:
        return np.zeros(0)
    expected = (stop - start) * rate_hz
    n = int(expected + 6 * math.sqrt(expected) + 10)
    times = start + np.cumsum(rng.exponential(1 / rate_hz, size=n))
    while times[-1] < stop:
        more = times[-1] + np.cumsum(rng.exponential(1 / rate_hz, size=n))
        times = np.concatenate([times, more])
    return times[times < stop]


class Simulator:
    def __init__(self, devices: list[DeviceState], *, duration: float, seed: int = 0,
                 start_time: float = 0.0, r_bt: float = 10.0, r_wifi: float = 50.0,
                 tick: float = 0.1, max_gap: float = 4.0, clock: EpochClock = DEFAULT_CLOCK):
        self.devices = devices
        self.t0 = start_time
        self.dt = tick
        self.n_ticks = int(round(duration / tick))
        self.r_bt = r_bt
        self.r_wifi = r_wifi
        self.max_gap = max_gap
        self.clock = clock
        self.tick_index = 0
        self.hooks: list[Callable[["Simulator", float], None]] = []
        self.log = EventLogBuilder()

        n = len(devices)
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
        times = self.t0 + np.arange(self.n_ticks) * self.dt
        self.positions = np.zeros((self.n_ticks, n, 2))
        self.bt_sched = np.zeros((self.n_ticks, n), dtype=bool)
        self.wifi_sched = np.zeros((self.n_ticks, n), dtype=bool)
        for i, d in enumerate(devices):
            if d.trajectory:
                ts = [w[0] for w in d.trajectory]
                self.positions[:, i, 0] = np.interp(times, ts, [w[1] for w in d.trajectory])
                self.positions[:, i, 1] = np.interp(times, ts, [w[2] for w in d.trajectory])
            else:
                self.positions[:, i] = d.pos
            if d.bt_rate > 0:
                phase = rng.uniform(0, 1 / d.bt_rate)
                self.bt_sched[_emission_ticks(d.bt_rate, phase, self.n_ticks, self.dt), i] = True
            if d.wifi_enabled and d.tag is not None and d.wifi_rate > 0:
                probe_t = poisson_times(rng, d.wifi_rate / 3600, 0.0, self.n_ticks * self.dt)
                self.wifi_sched[np.ceil(probe_t / self.dt - 1e-9).astype(np.int64).clip(0, self.n_ticks - 1), i] = True
        ranges = np.array([d.bt_range or r_bt for d in devices], dtype=float)
        self.link_range = np.maximum.outer(ranges, ranges) if n else np.zeros((0, 0))

    @property
    def now(self) -> float:
        return self.t0 + self.tick_index * self.dt

    def done(self) -> bool:
        return self.tick_index >= self.n_ticks

    def _deliver_bt(self, e, codes, dist, pos, t):
        emitter = self.devices[e]
        for code in codes:
            owner = e if emitter.advertiser is None else None
            cidx = self.log.code_index(code, owner)
            for r in np.flatnonzero(dist[e] <= self.link_range[e]):
                if r == e:
                    continue
                d = float(dist[e, r])
                self.log.add(t, BT, e, int(r), cidx, d, pos[e, 0], pos[e, 1])
                if self._is_own(int(r), code):
                    # a phone ignores its own identifiers played back to it
                    continue
                # apparent distance: an extender's stronger signal reads as closer
                apparent = d * self.r_bt / self.link_range[e, r]
                inbox = self.devices[r].inbox
                rec = inbox.get(code.id_bytes)
                if rec is None:
                    rec = inbox[code.id_bytes] = EncounterRecord(code, t, apparent, 0.0, int(r), t, e)
                else:
                    rec.observe(t, apparent, self.max_gap)
                rec.via.add(e)

    def _is_own(self, r: int, code) -> bool:
        keys = self.devices[r].keys
        if keys is None:
            return False
        return keys.code_at(code.epoch_index * self.clock.epoch_len).id_bytes == code.id_bytes

    def step(self) -> None:
        k = self.tick_index
        t = round(self.now, 6)
        pos = self.positions[k]
        bt_emit = []
        for i, d in enumerate(self.devices):
            if d.advertiser is not None:
                codes = d.advertiser(d, t)
            elif self.bt_sched[k, i]:
                codes = [d.keys.code_at(t)]
            else:
                codes = []
            if codes:
                bt_emit.append((i, codes))
        wifi_emit = np.flatnonzero(self.wifi_sched[k])
        if bt_emit or len(wifi_emit):
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.sqrt((diff ** 2).sum(-1))
            for e, codes in bt_emit:
                self._deliver_bt(e, codes, dist, pos, t)
            for e in wifi_emit:
                tidx = self.log.tag_index(self.devices[e].tag)
                for r in np.flatnonzero(dist[e] <= self.r_wifi):
                    if r != e:
                        self.log.add(t, WIFI, int(e), int(r), tidx, float(dist[e, r]), pos[e, 0], pos[e, 1])
        for hook in self.hooks:
            hook(self, t)
        self.tick_index += 1

    def run(self) -> EventLog:
        while not self.done():
            self.step()
        return self.log.build(self.devices)


def run_world(config: WorldConfig, seed: int, devices: list[DeviceState] | None = None,
              hooks=()) -> EventLog:
    devices = devices if devices is not None else build_devices(config, seed)
    sim = Simulator(devices, duration=config.duration, seed=seed, start_time=config.start_time,
                    r_bt=config.r_bt, r_wifi=config.r_wifi, tick=config.tick,
                    max_gap=config.max_gap, clock=config.clock)
    sim.hooks.extend(hooks)
    return sim.run()
