"""
Contact-isolation: pool testing over simulated accounts.

The attacker's collector records every code it hears.  The distributor
splits the collection into pools, the device simulator uploads each pool
from a fresh account, and the analyzer reads which accounts got notified.
Positive pools are split again until each positive pool holds one item.

Items are either raw ``EncounterCode`` values or ``ContactSession`` groups
(all codes the attacker linked to one physically present device).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from ctlab.protocol import EncounterCode
from ctlab.server import FirewallRejected
from ctlab.world.eventlog import BT, EventLog


class EncounterSet(tuple):
    """Ordered, duplicate-free collection of pool items."""

    def __new__(cls, items: Iterable = ()):
        return super().__new__(cls, dict.fromkeys(items))

    def codes(self) -> list[EncounterCode]:
        return [c for item in self for c in codes_of(item)]


@dataclass(frozen=True)
class ContactSession:
    """Codes one device broadcast while the attacker watched it.

    The attacker links an identifier to the next one when the old address
    stops and a new one starts in the same place at the same moment; the
    simulation stands in for that with the emitter index.  ``device`` is
    ground truth kept for reporting.
    """

    label: str
    codes: tuple[EncounterCode, ...]
    device: int = -1


def codes_of(item) -> tuple[EncounterCode, ...]:
    if isinstance(item, EncounterCode):
        return (item,)
    return item.codes


@dataclass
class PartitionPlan:
    partitions: list[EncounterSet]
    flags: list[bool] = field(default_factory=list)
    n: int = 2
    round: int = 0
    # positive pools deferred to a later round because n accounts were not enough
    pending: list[EncounterSet] = field(default_factory=list)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least 2 simulated devices")
        if self.flags and len(self.flags) != len(self.partitions):
            raise ValueError("one flag per partition")

    @property
    def positive(self) -> list[EncounterSet]:
        return [p for p, f in zip(self.partitions, self.flags) if f]

    def is_empty(self) -> bool:
        return not self.partitions and not self.pending


@dataclass
class IsolationResult:
    identified: list = field(default_factory=list)
    rounds_used: int = 0
    accounts_used: int = 0
    ambiguous: list[EncounterSet] = field(default_factory=list)
    partial: bool = False

    def identified_codes(self) -> set[EncounterCode]:
        return {c for item in self.identified for c in codes_of(item)}

    def identified_devices(self) -> list[int]:
        return sorted({item.device for item in self.identified if isinstance(item, ContactSession)})


def split_contiguous(items: Sequence, parts: int) -> list[EncounterSet]:
    """``parts`` contiguous slices of near-equal size; the last takes the remainder."""
    parts = max(1, min(parts, len(items)))
    size = len(items) // parts
    out = [EncounterSet(items[j * size:(j + 1) * size]) for j in range(parts - 1)]
    out.append(EncounterSet(items[(parts - 1) * size:]))
    return out


def initial_plan(c_att: Sequence, n: int) -> PartitionPlan:
    items = EncounterSet(c_att)
    return PartitionPlan(split_contiguous(items, n) if items else [], [], n, 1)


def refine_partitions(plan: PartitionPlan) -> PartitionPlan:
    """Split positive pools for the next round; negatives and confirmed
    singletons are dropped.  At most ``n`` new pools are produced; positive
    pools that do not fit wait in ``pending``."""
    work = [p for p in plan.pending + plan.positive if len(p) > 1]
    if not work:
        return PartitionPlan([], [], plan.n, plan.round + 1)
    set_pool = max(2, plan.n // len(work))
    batch = plan.n // set_pool
    now, later = work[:batch], work[batch:]
    partitions = [sub for pool in now for sub in split_contiguous(pool, set_pool)]
    return PartitionPlan(partitions, [], plan.n, plan.round + 1, later)


def collect_contacts(attacker_devices, log: EventLog) -> EncounterSet:
    """Distinct codes heard by the attacker's device(s), in order of first reception."""
    ids = _device_ids(attacker_devices)
    idx = np.flatnonzero(log.mask(BT, receivers=ids))
    return EncounterSet(log.codes[p] for p in log.payload[idx].tolist())


def collect_sessions(attacker_devices, log: EventLog) -> EncounterSet:
    """Codes heard by the attacker grouped per emitting device, in order of first contact."""
    ids = _device_ids(attacker_devices)
    idx = np.flatnonzero(log.mask(BT, receivers=ids))
    groups: dict[int, dict[int, None]] = {}
    for e, p in zip(log.emitter[idx].tolist(), log.payload[idx].tolist()):
        groups.setdefault(e, {})[p] = None
    sessions = []
    for e, payloads in groups.items():
        dev = log.devices[e] if e < len(log.devices) else None
        label = dev.label if dev is not None else str(e)
        sessions.append(ContactSession(label, tuple(log.codes[p] for p in payloads), e))
    return EncounterSet(sessions)


def _device_ids(devices) -> list[int]:
    if isinstance(devices, (int, np.integer)) or hasattr(devices, "device_id"):
        devices = [devices]
    return [d if isinstance(d, (int, np.integer)) else d.device_id for d in devices]


class DeviceFleet:
    """Fresh simulated accounts, rotating source labels when the firewall pushes back."""

    def __init__(self, server, sources: Iterable[Hashable] | None = None, rotate: bool = True):
        self.server = server
        self.rotate = rotate
        self._sources = iter(sources) if sources is not None else (
            f"attacker-{i}" for i in itertools.count())
        self.source = next(self._sources)
        self.accounts_used = 0

    def new_account(self) -> int:
        while True:
            try:
                acct = self.server.create_account(self.source)
                self.accounts_used += 1
                return acct
            except FirewallRejected:
                if not self.rotate:
                    raise
                nxt = next(self._sources, None)
                if nxt is None:
                    raise
                self.source = nxt

    def query(self, pools: Sequence[EncounterSet]) -> list[bool]:
        accounts = []
        for pool in pools:
            acct = self.new_account()
            self.server.upload_encounters(acct, pool.codes())
            accounts.append(acct)
        return [self.server.poll_notifications(a) for a in accounts]


def run_isolation(c_att: Sequence, n: int, server, *, rounds_max: int = 64,
                  sources: Iterable[Hashable] | None = None, rotate: bool = True) -> IsolationResult:
    """Pool-test ``c_att`` with ``n`` simulated accounts per round until every
    positive pool is a singleton."""
    if n < 2:
        raise ValueError("n must be >= 2")
    fleet = DeviceFleet(server, sources, rotate)
    result = IsolationResult()
    plan = initial_plan(c_att, n)
    if not plan.partitions:
        result.rounds_used = 1
        return result
    while not plan.is_empty():
        if plan.round > rounds_max:
            result.partial = True
            break
        try:
            plan.flags = fleet.query(plan.partitions)
        except FirewallRejected:
            result.partial = True
            break
        result.rounds_used = plan.round
        for pool in plan.positive:
            if len(pool) == 1:
                result.identified.append(pool[0])
        plan = refine_partitions(plan)
    if result.partial:
        # unresolved pools: deferred positives plus the unanswered round
        result.ambiguous = list(plan.pending) + list(plan.partitions)
    result.accounts_used = fleet.accounts_used
    return result
