"""
Contact-pollution: relay genuine codes between victims who never met.

Collectors upload every code their radio hears to a shared concentrator;
polluters download fresh codes and rebroadcast them round-robin.  A single
attacker device that does both doubles the effective contact radius; two
devices at remote sites joined by the concentrator make it unbounded.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ctlab.protocol import DEFAULT_CLOCK, EncounterCode, EpochClock, ExposureParams
from ctlab.world.model import ConfigError, DeviceState
from ctlab.world.sim import DeviceSpec, Simulator, WorldConfig, build_devices

SLOT_MS = 400
MAX_INTERVAL_MS = 4000
# long-range transmitters reach about this far
MAX_EXTENDER_RANGE = 100.0


class CapacityExceeded(ValueError):
    def __init__(self, requested: int, capacity: int, admissible: Sequence[EncounterCode]):
        super().__init__(f"{requested} codes exceed broadcast capacity {capacity}")
        self.requested = requested
        self.capacity = capacity
        self.admissible = list(admissible)


def broadcast_capacity(slot_ms: int = SLOT_MS, max_interval_ms: int = MAX_INTERVAL_MS) -> int:
    return max_interval_ms // slot_ms


@dataclass(frozen=True)
class BroadcastSchedule:
    """One round-robin cycle; slot ``k`` carries ``slots[k]`` from ``k * slot_ms``."""

    slots: tuple[tuple[EncounterCode, int], ...]
    slot_ms: int = SLOT_MS
    max_interval_ms: int = MAX_INTERVAL_MS

    @property
    def period_ms(self) -> int:
        return len(self.slots) * self.slot_ms

    @property
    def codes(self) -> list[EncounterCode]:
        return [c for c, _ in self.slots]

    def trace(self, duration_ms: int) -> list[tuple[EncounterCode, int]]:
        """Every (code, start_ms) transmitted in ``[0, duration_ms)``."""
        if not self.slots:
            return []
        out = []
        for k in range(-(-duration_ms // self.slot_ms)):
            out.append((self.slots[k % len(self.slots)][0], k * self.slot_ms))
        return out

    def max_gaps(self, duration_ms: int) -> dict[EncounterCode, int]:
        last: dict[EncounterCode, int] = {}
        worst: dict[EncounterCode, int] = {}
        for code, start in self.trace(duration_ms):
            if code in last:
                worst[code] = max(worst.get(code, 0), start - last[code])
            last[code] = start
        return worst


def plan_broadcast(codes: Iterable[EncounterCode], slot_ms: int = SLOT_MS,
                   max_interval_ms: int = MAX_INTERVAL_MS) -> BroadcastSchedule:
    if slot_ms <= 0 or max_interval_ms < slot_ms:
        raise ValueError("need 0 < slot_ms <= max_interval_ms")
    codes = list(dict.fromkeys(codes))
    cap = broadcast_capacity(slot_ms, max_interval_ms)
    if len(codes) > cap:
        raise CapacityExceeded(len(codes), cap, codes[:cap])
    return BroadcastSchedule(tuple((c, k * slot_ms) for k, c in enumerate(codes)),
                             slot_ms, max_interval_ms)


def interaction_cost(n_false: int) -> int:
    """Interactions needed for ``n_false`` false contacts: each needs one
    collection and one rebroadcast."""
    if n_false < 0:
        raise ValueError("n_false must be >= 0")
    return 2 * n_false


@dataclass
class _Entry:
    code: EncounterCode
    first_seen: float
    collector: str


class ConcentratorStore:
    """Shared code pool between collectors and polluters.

    A code stays downloadable until one grace epoch after its own epoch.
    """

    def __init__(self, clock: EpochClock = DEFAULT_CLOCK, grace_epochs: int = 1):
        self.clock = clock
        self.grace_epochs = grace_epochs
        self._entries: dict[bytes, _Entry] = {}
        self._lock = threading.Lock()
        self.uploads = 0
        self.downloads = 0

    def upload(self, collector: str, codes: Iterable[EncounterCode], now: float) -> int:
        added = 0
        with self._lock:
            self.uploads += 1
            for c in codes:
                if c.id_bytes not in self._entries:
                    self._entries[c.id_bytes] = _Entry(c, now, collector)
                    added += 1
        return added

    def download(self, now: float) -> list[EncounterCode]:
        """Fresh codes in upload order."""
        oldest = self.clock.epoch_index(now) - self.grace_epochs
        with self._lock:
            self.downloads += 1
            return [e.code for e in self._entries.values() if e.code.epoch_index >= oldest]

    def __len__(self):
        return len(self._entries)

    def __contains__(self, code: EncounterCode):
        return code.id_bytes in self._entries

    def collected(self) -> set[bytes]:
        with self._lock:
            return set(self._entries)


class Collector:
    """Tick hook: forward new inbox entries of an attacker device."""

    def __init__(self, device: DeviceState, store: ConcentratorStore):
        self.device = device
        self.store = store
        self._sent: set[bytes] = set()

    def __call__(self, sim, t: float) -> None:
        new = [r.code for k, r in self.device.inbox.items() if k not in self._sent]
        if new:
            self._sent.update(c.id_bytes for c in new)
            self.store.upload(self.device.label, new, t)


class Polluter:
    """Advertiser replaying concentrator codes, one per slot.

    Codes already on air keep their position so no code's gap grows past
    one cycle when the set changes; new codes fill free slots up to capacity.
    """

    def __init__(self, store: ConcentratorStore, slot_ms: int = SLOT_MS,
                 max_interval_ms: int = MAX_INTERVAL_MS, tick_ms: int = 100):
        self.store = store
        self.slot_ms = slot_ms
        self.max_interval_ms = max_interval_ms
        self.tick_ms = tick_ms
        self.schedule = plan_broadcast([], slot_ms, max_interval_ms)
        self.dropped: set[bytes] = set()
        self._slot = 0

    def _refresh(self, t: float) -> None:
        fresh = self.store.download(t)
        fresh_ids = {c.id_bytes for c in fresh}
        keep = [c for c in self.schedule.codes if c.id_bytes in fresh_ids]
        kept = {c.id_bytes for c in keep}
        # newest first for the free slots
        wanted = keep + [c for c in reversed(fresh) if c.id_bytes not in kept]
        try:
            self.schedule = plan_broadcast(wanted, self.slot_ms, self.max_interval_ms)
        except CapacityExceeded as exc:
            self.dropped.update(c.id_bytes for c in wanted[exc.capacity:])
            self.schedule = plan_broadcast(exc.admissible, self.slot_ms, self.max_interval_ms)

    def __call__(self, device: DeviceState, t: float) -> list[EncounterCode]:
        t_ms = round(t * 1000)
        if t_ms % self.slot_ms >= self.tick_ms:
            return []
        if not self.schedule.slots or self._slot % len(self.schedule.slots) == 0:
            self._refresh(t)
            self._slot = 0
        if not self.schedule.slots:
            return []
        code = self.schedule.slots[self._slot % len(self.schedule.slots)][0]
        self._slot += 1
        return [code]


@dataclass
class AttackerSpec:
    name: str
    collect: bool = True
    pollute: bool = True


@dataclass
class PollutionScenario:
    world: WorldConfig
    attackers: list[AttackerSpec]
    diagnosed: list[str] = field(default_factory=list)
    seed: int = 0
    exposure: ExposureParams = field(default_factory=ExposureParams)
    slot_ms: int = SLOT_MS
    max_interval_ms: int = MAX_INTERVAL_MS

    def __post_init__(self):
        names = {d.name for d in self.world.devices}
        for a in self.attackers:
            if a.name not in names:
                raise ConfigError(f"attacker {a.name!r} is not a scenario device")
        for d in self.diagnosed:
            if d not in names:
                raise ConfigError(f"diagnosed device {d!r} is not a scenario device")
        for spec in self.world.devices:
            if spec.bt_range is not None and spec.bt_range > MAX_EXTENDER_RANGE:
                raise ConfigError(f"{spec.name}: extender range above {MAX_EXTENDER_RANGE} m")


@dataclass
class VictimOutcome:
    matched: int = 0
    injected: int = 0
    genuine: int = 0
    notified: bool = False

    @property
    def false_notification(self) -> bool:
        return self.notified and self.genuine == 0


@dataclass
class PollutionReport:
    injected_records: int
    false_notifications: int
    per_victim: dict[str, VictimOutcome]
    replay_only: bool
    concentrator_codes: int
    dropped_for_capacity: int = 0

    @property
    def interactions(self) -> int:
        return interaction_cost(self.injected_records)


def run_pollution(attacker_devices: Sequence[AttackerSpec] | None, scenario: PollutionScenario,
                  server) -> PollutionReport:
    """Simulate the scenario with attackers relaying, report diagnoses, then
    let every victim's app check its close contacts against the server."""
    attackers = list(attacker_devices) if attacker_devices is not None else scenario.attackers
    cfg = scenario.world
    devices = build_devices(cfg, scenario.seed)
    by_name = {d.name: d for d in devices}
    store = ConcentratorStore(cfg.clock)
    hooks, polluters = [], []
    tick_ms = round(cfg.tick * 1000)
    for a in attackers:
        dev = by_name[a.name]
        dev.role = "attacker"
        dev.wifi_enabled = False
        if a.collect:
            hooks.append(Collector(dev, store))
        if a.pollute:
            p = Polluter(store, scenario.slot_ms, scenario.max_interval_ms, tick_ms)
            polluters.append(p)
            dev.advertiser = p
        else:
            dev.advertiser = lambda d, t: []
    sim = Simulator(devices, duration=cfg.duration, seed=scenario.seed, start_time=cfg.start_time,
                    r_bt=cfg.r_bt, r_wifi=cfg.r_wifi, tick=cfg.tick, max_gap=cfg.max_gap,
                    clock=cfg.clock)
    sim.hooks.extend(hooks)
    log = sim.run()

    end_day = cfg.clock.day_index(cfg.start_time + cfg.duration)
    diagnosed_ids = set()
    for name in scenario.diagnosed:
        covid = f"covid-{name}"
        server.issue_covidcode(covid)
        server.report_positive(by_name[name], covid, current_day=end_day)
        diagnosed_ids.add(by_name[name].device_id)
    attacker_ids = {by_name[a.name].device_id for a in attackers}
    collected = store.collected()
    owner = {code.id_bytes: log.code_owner.get(i) for i, code in enumerate(log.codes)}

    per_victim: dict[str, VictimOutcome] = {}
    injected = 0
    replay_only = True
    for dev in devices:
        if dev.device_id in attacker_ids or dev.device_id in diagnosed_ids or dev.role != "user":
            continue
        out = VictimOutcome()
        close = [r for r in dev.records()
                 if r.distance <= scenario.exposure.max_distance
                 and r.dwell >= scenario.exposure.min_dwell]
        for r in close:
            relayed = bool(r.via & attacker_ids)
            direct = owner.get(r.code.id_bytes) in r.via
            if relayed and not direct:
                out.injected += 1
                injected += 1
                replay_only &= r.code.id_bytes in collected
        acct = server.create_account(f"victim-{dev.label}")
        server.upload_encounters(acct, [r.code for r in close])
        out.notified = server.poll_notifications(acct)
        for r in close:
            if server.is_diagnosed(r.code):
                out.matched += 1
                if owner.get(r.code.id_bytes) in r.via:
                    out.genuine += 1
        per_victim[dev.label] = out
    return PollutionReport(
        injected_records=injected,
        false_notifications=sum(v.false_notification for v in per_victim.values()),
        per_victim=per_victim,
        replay_only=replay_only,
        concentrator_codes=len(store),
        dropped_for_capacity=len(set().union(*(p.dropped for p in polluters))) if polluters else 0,
    )


def relay_scenario(diagnosed: Sequence[str] = ("Alice",), victims: Sequence[str] = ("Alice", "Bob"),
                  r_bt: float = 5.0, spacing: float = 4.0, duration: float = 60.0,
                  seed: int = 0) -> PollutionScenario:
    """Victims on a circle of radius ``spacing`` around one relaying attacker;
    with the defaults no two victims are within ``r_bt`` of each other."""
    specs = [DeviceSpec("attacker", pos=(0.0, 0.0), wifi_enabled=False, role="attacker")]
    for k, name in enumerate(victims):
        ang = 2 * math.pi * k / len(victims)
        specs.append(DeviceSpec(name, pos=(spacing * math.cos(ang), spacing * math.sin(ang))))
    world = WorldConfig(specs, duration=duration, r_bt=r_bt)
    return PollutionScenario(world, [AttackerSpec("attacker")], list(diagnosed), seed)


def remote_sites_scenario(sites: int = 2, victims_per_site: int = 1, site_distance: float = 1000.0,
                          extender_range: float | None = None, duration: float = 60.0,
                          seed: int = 0) -> PollutionScenario:
    """One diagnosed user at site 0; every other site has an attacker and
    ``victims_per_site`` victims.  Site 0's attacker only collects."""
    if sites < 2:
        raise ConfigError("need a source site and at least one target site")
    specs, attackers = [], []
    for s in range(sites):
        cx = s * site_distance
        name = f"attacker-{s}"
        specs.append(DeviceSpec(name, pos=(cx, 0.0), wifi_enabled=False, role="attacker",
                                bt_range=extender_range))
        attackers.append(AttackerSpec(name, collect=s == 0, pollute=s > 0))
        if s == 0:
            specs.append(DeviceSpec("patient", pos=(cx + 3.0, 0.0)))
            continue
        for v in range(victims_per_site):
            ang = 2 * math.pi * v / victims_per_site
            specs.append(DeviceSpec(f"victim-{s}-{v}", pos=(cx + 3.0 * math.cos(ang), 3.0 * math.sin(ang))))
    world = WorldConfig(specs, duration=duration)
    return PollutionScenario(world, attackers, ["patient"], seed)
