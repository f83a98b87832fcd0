"""Columnar log of delivered radio events."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ctlab.protocol import EncounterCode

BT = 0
WIFI = 1
KIND_NAMES = {BT: "bt", WIFI: "wifi"}


@dataclass(frozen=True, order=True)
class Tag:
    """Persistent (WiFi MAC, SSID) pair leaked by probe requests."""

    wifi_mac: int
    ssid: str

    def hex(self) -> str:
        return f"{self.wifi_mac:012x}/{self.ssid.encode().hex()}"

    def __str__(self):
        mac = ":".join(f"{(self.wifi_mac >> s) & 0xFF:02x}" for s in range(40, -8, -8))
        return f"{mac}|{self.ssid}"


@dataclass(frozen=True)
class RadioEvent:
    kind: str
    emitter: int
    receiver: int
    payload: EncounterCode | Tag
    time: float
    pos: tuple[float, float]
    distance: float


_COLUMNS = (
    ("time", np.float64),
    ("kind", np.int8),
    ("emitter", np.int32),
    ("receiver", np.int32),
    ("payload", np.int32),
    ("distance", np.float32),
    ("ex", np.float64),
    ("ey", np.float64),
)


class EventLog:
    """Every reception in a scenario, one row per (emission, receiver).

    Payloads are stored as indices into ``codes`` (BT rows) or ``tags``
    (WiFi rows).  ``code_owner`` maps a code index to the device whose key
    produced it, which differs from ``emitter`` only for replayed adverts.
    """

    def __init__(self, columns: dict[str, np.ndarray] | None = None, codes=(), tags=(),
                 code_owner=None, devices=None):
        columns = columns or {}
        for name, dtype in _COLUMNS:
            setattr(self, name, np.asarray(columns.get(name, ()), dtype=dtype))
        n = len(self.time)
        if any(len(getattr(self, name)) != n for name, _ in _COLUMNS):
            raise ValueError("event columns differ in length")
        self.codes: list[EncounterCode] = list(codes)
        self.tags: list[Tag] = list(tags)
        self.code_owner: dict[int, int] = dict(code_owner or {})
        self.devices = devices or []

    def __len__(self):
        return len(self.time)

    def payload_of(self, i: int) -> EncounterCode | Tag:
        idx = int(self.payload[i])
        return self.codes[idx] if self.kind[i] == BT else self.tags[idx]

    def event(self, i: int) -> RadioEvent:
        return RadioEvent(
            kind=KIND_NAMES[int(self.kind[i])],
            emitter=int(self.emitter[i]),
            receiver=int(self.receiver[i]),
            payload=self.payload_of(i),
            time=float(self.time[i]),
            pos=(float(self.ex[i]), float(self.ey[i])),
            distance=float(self.distance[i]),
        )

    def __iter__(self) -> Iterator[RadioEvent]:
        for i in range(len(self)):
            yield self.event(i)

    def mask(self, kind: int | None = None, receivers=None, emitters=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if kind is not None:
            m &= self.kind == kind
        if receivers is not None:
            m &= np.isin(self.receiver, np.fromiter(receivers, dtype=np.int64))
        if emitters is not None:
            m &= np.isin(self.emitter, np.fromiter(emitters, dtype=np.int64))
        return m

    def received_codes(self, receiver: int) -> list[EncounterCode]:
        """Distinct BT codes heard by ``receiver``, in order of first reception."""
        idx = np.flatnonzero(self.mask(BT, receivers=[receiver]))
        seen = dict.fromkeys(int(p) for p in self.payload[idx])
        return [self.codes[p] for p in seen]

    def owner_of(self, code: EncounterCode) -> int | None:
        for idx, c in enumerate(self.codes):
            if c == code:
                return self.code_owner.get(idx)
        return None

    def write_csv(self, fp) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["time", "kind", "emitter", "receiver", "payload"])
        code_hex = [c.hex() for c in self.codes]
        tag_hex = [t.hex() for t in self.tags]
        for t, k, e, r, p in zip(self.time.tolist(), self.kind.tolist(), self.emitter.tolist(),
                                 self.receiver.tolist(), self.payload.tolist()):
            w.writerow([f"{t:.1f}", KIND_NAMES[k], e, r, code_hex[p] if k == BT else tag_hex[p]])

    def to_csv(self, path=None) -> str | None:
        if path is None:
            buf = io.StringIO()
            self.write_csv(buf)
            return buf.getvalue()
        with open(path, "w", newline="") as fp:
            self.write_csv(fp)
        return None

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, _ in _COLUMNS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        for c in self.codes:
            h.update(c.id_bytes)
        for tag in self.tags:
            h.update(tag.hex().encode())
        return h.hexdigest()


class EventLogBuilder:
    """Accumulates event rows in chunks and interns payloads."""

    def __init__(self):
        self._chunks: list[dict[str, np.ndarray]] = []
        self._rows: dict[str, list] = {name: [] for name, _ in _COLUMNS}
        self.codes: list[EncounterCode] = []
        self.tags: list[Tag] = []
        self._code_idx: dict[EncounterCode, int] = {}
        self._tag_idx: dict[Tag, int] = {}
        self.code_owner: dict[int, int] = {}

    def code_index(self, code: EncounterCode, owner: int | None = None) -> int:
        idx = self._code_idx.get(code)
        if idx is None:
            idx = self._code_idx[code] = len(self.codes)
            self.codes.append(code)
            if owner is not None:
                self.code_owner[idx] = owner
        return idx

    def tag_index(self, tag: Tag) -> int:
        idx = self._tag_idx.get(tag)
        if idx is None:
            idx = self._tag_idx[tag] = len(self.tags)
            self.tags.append(tag)
        return idx

    def add(self, time, kind, emitter, receiver, payload, distance, ex, ey):
        for name, value in zip(("time", "kind", "emitter", "receiver", "payload", "distance", "ex", "ey"),
                               (time, kind, emitter, receiver, payload, distance, ex, ey)):
            self._rows[name].append(value)

    def add_columns(self, **cols):
        self._chunks.append({name: np.asarray(cols[name], dtype=dtype) for name, dtype in _COLUMNS})

    def build(self, devices=None, sort=True) -> EventLog:
        chunks = list(self._chunks)
        if self._rows["time"]:
            chunks.append({name: np.asarray(self._rows[name], dtype=dtype) for name, dtype in _COLUMNS})
        if chunks:
            cols = {name: np.concatenate([c[name] for c in chunks]) for name, _ in _COLUMNS}
        else:
            cols = {}
        if sort and cols:
            order = np.lexsort((cols["payload"], cols["receiver"], cols["emitter"], cols["kind"], cols["time"]))
            cols = {k: v[order] for k, v in cols.items()}
        return EventLog(cols, self.codes, self.tags, self.code_owner, devices)
