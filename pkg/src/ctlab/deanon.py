"""
Linking ephemeral BLE addresses of infected users to persistent WiFi tags.

Step 1 pairs every BLE sighting at a sensor with the tags probed shortly
before any of its receptions.  Step 2 takes the BLE addresses flagged as
infected and keeps, for each, the tags that only ever show up next to
infected addresses; the most frequent such tag wins.
"""

from __future__ import annotations

import csv
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ctlab.world.eventlog import BT, WIFI, EventLog, Tag
from ctlab.world.model import ConfigError, Table6Params
from ctlab.world.population import run_population, sample_population

IDENTIFIED = "identified"
AMBIGUOUS = "ambiguous"
MISSED = "missed"

# receptions of one address at one sensor further apart than this start a new sighting
SIGHTING_GAP = 60.0


def admission_window(r_wifi: float, r_bt: float, s: float) -> float:
    """Look-back (seconds) for tags paired with a BLE reception."""
    if s <= 0:
        raise ValueError("average speed must be positive")
    if r_bt <= 0 or r_wifi < r_bt:
        raise ValueError("need r_wifi >= r_bt > 0")
    return 2 * (r_wifi - r_bt) / s


@dataclass(frozen=True)
class BtSighting:
    m_bt: int
    t1: float
    sensor_id: int


@dataclass
class TagPairRecord:
    m_bt: int
    T: frozenset[Tag]
    sensor_id: int
    t_first: float
    t_last: float
    # ground truth for scoring only
    device: int = -1


@dataclass(frozen=True)
class BtOutcome:
    status: str
    tag: Tag | None = None
    candidates: tuple[Tag, ...] = ()


@dataclass
class MatchOutcome:
    per_bt: dict[int, BtOutcome] = field(default_factory=dict)

    def counts(self) -> Counter:
        return Counter(o.status for o in self.per_bt.values())

    def score(self, bt_owner: dict[int, int], owner_tag: dict[int, Tag],
              observed_tags: Iterable[Tag]) -> "DetectionScore":
        """Per infected tag: identified, ambiguous (true tag among tied
        candidates) or missed.  ``bt_owner``/``owner_tag`` are ground truth."""
        by_device: dict[int, list[BtOutcome]] = defaultdict(list)
        false_ids = 0
        for m_bt, out in self.per_bt.items():
            dev = bt_owner.get(m_bt, -1)
            by_device[dev].append(out)
            if out.status == IDENTIFIED and owner_tag.get(dev) != out.tag:
                false_ids += 1
        tag_owner = {tag: dev for dev, tag in owner_tag.items()}
        status = {}
        for tag in observed_tags:
            dev = tag_owner.get(tag)
            if dev is None:
                continue
            outs = by_device.get(dev, [])
            if any(o.status == IDENTIFIED and o.tag == tag for o in outs):
                status[tag] = IDENTIFIED
            elif any(o.status == AMBIGUOUS and tag in o.candidates for o in outs):
                status[tag] = AMBIGUOUS
            else:
                status[tag] = MISSED
        return DetectionScore(status, false_ids)


@dataclass
class DetectionScore:
    status: dict[Tag, str]
    false_identifications: int = 0

    @property
    def observed(self) -> int:
        return len(self.status)

    def count(self, which: str) -> int:
        return sum(1 for s in self.status.values() if s == which)

    @property
    def detection_rate(self) -> float:
        return self.count(IDENTIFIED) / self.observed if self.observed else float("nan")


def collect_pairs(log: EventLog, avg_speed: float, r_wifi: float | None = None,
                  r_bt: float | None = None) -> list[TagPairRecord]:
    """One record per BLE sighting; T holds every tag probed at the same
    sensor within the admission window before some reception of it."""
    params = getattr(log, "params", None)
    r_wifi = r_wifi if r_wifi is not None else (params.r_wifi if params else 50.0)
    r_bt = r_bt if r_bt is not None else (params.r_bt if params else 10.0)
    window = admission_window(r_wifi, r_bt, avg_speed)

    bt = np.flatnonzero(log.kind == BT)
    if not len(bt):
        return []
    macs = np.array([c.bt_mac for c in log.codes], dtype=np.int64)
    rx, t, m = log.receiver[bt].astype(np.int64), log.time[bt], macs[log.payload[bt]]
    emitter = log.emitter[bt]

    # sightings: runs of one address at one sensor
    order = np.lexsort((t, m, rx))
    rx, t, m, emitter = rx[order], t[order], m[order], emitter[order]
    new = np.ones(len(t), dtype=bool)
    new[1:] = (rx[1:] != rx[:-1]) | (m[1:] != m[:-1]) | (t[1:] - t[:-1] > SIGHTING_GAP)
    sighting = np.cumsum(new) - 1
    starts = np.flatnonzero(new)
    ends = np.append(starts[1:], len(t)) - 1

    # probes: find receptions at the same sensor within [t2, t2 + window]
    by_time = np.lexsort((t, rx))
    key = rx[by_time] * 1e7 + t[by_time]
    sight_by_time = sighting[by_time]
    wifi = np.flatnonzero(log.kind == WIFI)
    members: list[set[int]] = [set() for _ in range(len(starts))]
    if len(wifi):
        p_key = log.receiver[wifi].astype(np.int64) * 1e7 + log.time[wifi]
        lo = np.searchsorted(key, p_key - 1e-6, side="left")
        hi = np.searchsorted(key, p_key + window + 1e-6, side="right")
        counts = hi - lo
        rep = np.repeat(np.arange(len(wifi)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sids = sight_by_time[np.repeat(lo, counts) + offs]
        tag_ids = log.payload[wifi][rep]
        pairs = np.unique(np.stack([sids, tag_ids]), axis=1) if len(sids) else np.zeros((2, 0), int)
        for s, tg in pairs.T.tolist():
            members[s].add(tg)
    out = []
    for s, (a, b) in enumerate(zip(starts.tolist(), ends.tolist())):
        out.append(TagPairRecord(
            m_bt=int(m[a]),
            T=frozenset(log.tags[i] for i in members[s]),
            sensor_id=int(rx[a]),
            t_first=float(t[a]),
            t_last=float(t[b]),
            device=int(emitter[a]),
        ))
    return out


def match_tags(pairs: Sequence[TagPairRecord], infected_bt: Iterable[int]) -> MatchOutcome:
    infected = set(infected_bt)
    tag_freq: Counter = Counter()
    dirty: set[Tag] = set()
    t_inf: dict[int, set[Tag]] = defaultdict(set)
    for p in pairs:
        tag_freq.update(p.T)
        if p.m_bt in infected:
            t_inf[p.m_bt] |= p.T
        else:
            dirty |= p.T
    outcome = MatchOutcome()
    for m_bt in sorted(infected):
        cands = sorted(t for t in t_inf.get(m_bt, ()) if t not in dirty)
        if not cands:
            outcome.per_bt[m_bt] = BtOutcome(MISSED)
            continue
        best = max(tag_freq[c] for c in cands)
        top = tuple(c for c in cands if tag_freq[c] == best)
        if len(top) == 1:
            outcome.per_bt[m_bt] = BtOutcome(IDENTIFIED, top[0], top)
        else:
            outcome.per_bt[m_bt] = BtOutcome(AMBIGUOUS, None, top)
    return outcome


def ground_truth(log: EventLog):
    """(infected BLE addresses seen, address -> device, device -> probed tag)."""
    devices = [d for d in log.devices if d.role == "user"]
    bt_owner = {code.bt_mac: log.code_owner[i] for i, code in enumerate(log.codes)
                if i in log.code_owner}
    infected_bt = {m for m, dev in bt_owner.items() if devices[dev].infected}
    owner_tag = {d.device_id: d.tag for d in devices if d.infected and d.tag is not None}
    return infected_bt, bt_owner, owner_tag


def observed_tags(log: EventLog) -> set[Tag]:
    """Tags of devices heard at least once by any receiver, over either radio.

    A device whose BLE adverts were caught but whose probes were not still
    counts: it came in range, the attacker just never saw its tag.
    """
    emitters = np.unique(log.emitter).tolist()
    return {log.devices[i].tag for i in emitters if log.devices[i].tag is not None}


@dataclass
class DetectionRun:
    seed: int
    pairs: int
    score: DetectionScore
    outcome: MatchOutcome


def run_detection(params: Table6Params, seed: int, infected_bt: Iterable[int] | None = None) -> DetectionRun:
    log = run_population(params, seed)
    pairs = collect_pairs(log, params.mean_speed)
    truth_bt, bt_owner, owner_tag = ground_truth(log)
    outcome = match_tags(pairs, truth_bt if infected_bt is None else infected_bt)
    return DetectionRun(seed, len(pairs), outcome.score(bt_owner, owner_tag, observed_tags(log)), outcome)


SWEEP_PARAMS = ("encounter_count", "wifi_frequency", "speed")


@dataclass
class SweepPoint:
    value: float
    rates: list[float]
    outcomes: Counter

    @property
    def mean_rate(self) -> float:
        return statistics.fmean(self.rates)

    @property
    def stddev(self) -> float:
        return statistics.pstdev(self.rates) if len(self.rates) > 1 else 0.0


def _cell(args):
    params, seed = args
    run = run_detection(params, seed)
    return run.score.detection_rate, Counter(run.score.status.values())


def sweep_detection_rate(param: str, values: Sequence[float], base: Table6Params,
                         seeds: Sequence[int] | int, workers: int = 1) -> list[SweepPoint]:
    """Detection rate as one infected-user parameter is pinned to each value."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {SWEEP_PARAMS}")
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    cells = [(base.with_infected(**{param: v}), s) for v in values for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_cell, cells))
    else:
        results = [_cell(c) for c in cells]
    points = []
    for i, v in enumerate(values):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        hist: Counter = Counter()
        for _, h in chunk:
            hist.update(h)
        points.append(SweepPoint(float(v), [r for r, _ in chunk], hist))
    return points


def write_curve(points: Sequence[SweepPoint], fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["param_value", "mean_rate", "stddev"])
    for p in points:
        w.writerow([p.value, f"{p.mean_rate:.6f}", f"{p.stddev:.6f}"])


class SsidLocator:
    """Offline SSID -> (lat, lon) table standing in for a wardriving database."""

    def __init__(self, table: dict[str, tuple[float, float]] | None = None):
        self.table = dict(table or {})

    @classmethod
    def from_csv(cls, path) -> "SsidLocator":
        with open(path, newline="") as fp:
            return cls({row["ssid"]: (float(row["lat"]), float(row["lon"]))
                        for row in csv.DictReader(fp)})

    def locate(self, outcome: MatchOutcome) -> dict[int, tuple[Tag, tuple[float, float]]]:
        found = {}
        for m_bt, out in outcome.per_bt.items():
            if out.status == IDENTIFIED and out.tag.ssid in self.table:
                found[m_bt] = (out.tag, self.table[out.tag.ssid])
        return found


__all__ = [
    "AMBIGUOUS", "IDENTIFIED", "MISSED", "BtOutcome", "BtSighting", "DetectionScore",
    "MatchOutcome", "SsidLocator", "SweepPoint", "TagPairRecord", "admission_window",
    "collect_pairs", "match_tags", "run_detection", "sample_population", "sweep_detection_rate",
    "write_curve",
]
