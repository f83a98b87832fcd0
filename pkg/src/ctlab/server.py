"""
In-process exposure-notification backend.

One object serves both deployment styles.  In ``centralized`` mode the server
intersects each account's uploaded codes with identifiers derived from the
published keys.  In ``decentralized`` mode a poll runs the client-side
matcher against a downloaded snapshot of the key database.  Either way the
answer to ``poll_notifications`` is the same boolean.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Iterable

from ctlab.protocol import (
    DEFAULT_CLOCK,
    EncounterCode,
    EpochClock,
    KeyDatabase,
    TemporaryKey,
    identifiers_for_key,
)

CENTRALIZED = "centralized"
DECENTRALIZED = "decentralized"


class ServerError(Exception):
    pass


class FirewallRejected(ServerError):
    def __init__(self, source_addr: str, threshold: int):
        super().__init__(f"source {source_addr!r} reached connection threshold {threshold}")
        self.source_addr = source_addr
        self.threshold = threshold


class UnknownAccount(ServerError):
    pass


class InvalidCovidcode(ServerError):
    pass


class RegistrationRefused(ServerError):
    pass


@dataclass
class FirewallState:
    threshold: int = 10
    counters: dict[str, int] = field(default_factory=dict)

    def admit(self, source_addr: str) -> None:
        count = self.counters.get(source_addr, 0)
        if count >= self.threshold:
            raise FirewallRejected(source_addr, self.threshold)
        self.counters[source_addr] = count + 1


@dataclass
class Account:
    account_id: int
    source_addr: str
    uploaded: list[EncounterCode] = field(default_factory=list)
    notified: bool = False


class ExposureServer:
    def __init__(self, *, mode: str = CENTRALIZED, firewall_threshold: int = 10,
                 covidcodes: Iterable[str] = (), requires_phone: bool = False,
                 clock: EpochClock = DEFAULT_CLOCK, retention_days: int = 14):
        if mode not in (CENTRALIZED, DECENTRALIZED):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.firewall = FirewallState(firewall_threshold)
        self.requires_phone = requires_phone
        self.clock = clock
        self.retention_days = retention_days
        self.db = KeyDatabase(clock)
        self.accounts: dict[int, Account] = {}
        self._covidcodes = set(covidcodes)
        self._used_codes: set[str] = set()
        self._phones: set[str] = set()
        self._ids = itertools.count(1)
        self._diagnosed: set[bytes] = set()
        self._lock = threading.RLock()

    # -- registry -------------------------------------------------------
    def issue_covidcode(self, code: str) -> None:
        with self._lock:
            self._covidcodes.add(code)

    # -- the four client capabilities ----------------------------------
    def create_account(self, source_addr: str, phone: str | None = None) -> int:
        with self._lock:
            if self.requires_phone:
                if not phone:
                    raise RegistrationRefused("phone number required")
                if phone in self._phones:
                    raise RegistrationRefused(f"phone {phone} already registered")
            self.firewall.admit(source_addr)
            if phone:
                self._phones.add(phone)
            account_id = next(self._ids)
            self.accounts[account_id] = Account(account_id, source_addr)
            return account_id

    def upload_encounters(self, account_id: int, codes: Iterable[EncounterCode]) -> int:
        """Store codes a (possibly simulated) client says it encountered."""
        with self._lock:
            account = self._account(account_id)
            known = {c.id_bytes for c in account.uploaded}
            added = 0
            for c in codes:
                if c.id_bytes not in known:
                    known.add(c.id_bytes)
                    account.uploaded.append(c)
                    added += 1
            return added

    def report_positive(self, keys: Iterable[TemporaryKey] | object, covidcode: str,
                        current_day: int | None = None) -> int:
        """Publish a diagnosed device's recent keys; returns the number of new entries.

        ``keys`` is either an iterable of keys or a device carrying a
        ``keys`` schedule, in which case the last ``retention_days`` days up
        to ``current_day`` are published.
        """
        with self._lock:
            if covidcode not in self._covidcodes:
                raise InvalidCovidcode(covidcode)
            if hasattr(keys, "keys") and hasattr(keys.keys, "recent_keys"):
                schedule = keys.keys
                if current_day is None:
                    current_day = max(schedule.days, default=0)
                keys = schedule.recent_keys(current_day, self.retention_days)
            added = 0
            for key in keys:
                if self.db.add(key):
                    added += 1
                    self._diagnosed.update(c.id_bytes for c in identifiers_for_key(key, self.clock))
            self._used_codes.add(covidcode)
            return added

    def download_keys(self) -> KeyDatabase:
        with self._lock:
            return self.db.snapshot()

    def poll_notifications(self, account_id: int) -> bool:
        with self._lock:
            account = self._account(account_id)
            if self.mode == CENTRALIZED:
                hit = any(c.id_bytes in self._diagnosed for c in account.uploaded)
            else:
                published = self.db.snapshot().identifiers()
                hit = any(c.id_bytes in published for c in account.uploaded)
            if hit:
                account.notified = True
            return hit

    def notification_set(self) -> dict[int, bool]:
        with self._lock:
            return {a: self.poll_notifications(a) for a in self.accounts}

    # ------------------------------------------------------------------
    def _account(self, account_id: int) -> Account:
        try:
            return self.accounts[account_id]
        except KeyError:
            raise UnknownAccount(account_id) from None

    def is_diagnosed(self, code: EncounterCode) -> bool:
        with self._lock:
            return code.id_bytes in self._diagnosed
