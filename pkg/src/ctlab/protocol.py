"""
Rolling-identifier key schedule and local exposure matching.

A device draws one 16-byte temporary key per key period (a day by default).
Each key is expanded with HKDF-SHA256 into an identifier key, and the
identifier broadcast during epoch ``e`` is AES-128 of a fixed padded block
carrying ``e``.  Epoch indices are absolute (counted from scenario start), so
a key for day ``d`` covers epochs ``[d * epochs_per_key, (d + 1) * epochs_per_key)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_LEN = 16
ID_LEN = 16

_RPIK_INFO = b"EN-RPIK"
_RPI_PREFIX = b"EN-RPI" + bytes(6)


class ProtocolError(ValueError):
    """Raised for out-of-window epochs and malformed key material."""


@dataclass(frozen=True)
class EpochClock:
    epoch_len: int = 900
    key_period: int = 86400

    def __post_init__(self):
        if self.epoch_len <= 0 or self.key_period <= 0:
            raise ProtocolError("epoch_len and key_period must be positive")
        if self.key_period % self.epoch_len:
            raise ProtocolError(
                f"epoch_len {self.epoch_len} does not divide key_period {self.key_period}"
            )

    @property
    def epochs_per_key(self) -> int:
        return self.key_period // self.epoch_len

    def epoch_index(self, sim_time: float) -> int:
        # half-open intervals: a boundary instant belongs to the later epoch
        return math.floor(sim_time / self.epoch_len)

    def day_index(self, sim_time: float) -> int:
        return math.floor(sim_time / self.key_period)

    def day_of_epoch(self, epoch: int) -> int:
        return epoch // self.epochs_per_key

    def epoch_window(self, day_index: int) -> range:
        n = self.epochs_per_key
        return range(day_index * n, (day_index + 1) * n)


DEFAULT_CLOCK = EpochClock()


@dataclass(frozen=True)
class TemporaryKey:
    key_bytes: bytes
    day_index: int

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ProtocolError(f"temporary key must be {KEY_LEN} bytes")

    @classmethod
    def generate(cls, rng: np.random.Generator, day_index: int) -> "TemporaryKey":
        return cls(rng.bytes(KEY_LEN), day_index)

    def hex(self) -> str:
        return self.key_bytes.hex()


@dataclass(frozen=True, order=True)
class EncounterCode:
    id_bytes: bytes
    epoch_index: int

    def __post_init__(self):
        if len(self.id_bytes) != ID_LEN:
            raise ProtocolError(f"encounter code must be {ID_LEN} bytes")

    def hex(self) -> str:
        return self.id_bytes.hex()

    @property
    def bt_mac(self) -> int:
        """Advertising address paired with this identifier.

        The BLE address rotates together with the identifier, so it is taken
        from the identifier itself: 48 bits with the random-private bits set.
        """
        mac = int.from_bytes(self.id_bytes[-6:], "big")
        return (mac & 0x3FFFFFFFFFFF) | 0x400000000000

    def __repr__(self):
        return f"EncounterCode({self.hex()[:12]}..., epoch={self.epoch_index})"


@functools.lru_cache(maxsize=65536)
def _identifier_key(key_bytes: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=16, salt=None, info=_RPIK_INFO).derive(
        key_bytes
    )


def _padded(epoch: int) -> bytes:
    return _RPI_PREFIX + (epoch & 0xFFFFFFFF).to_bytes(4, "little")


def derive_identifier(
    key: TemporaryKey, epoch: int, clock: EpochClock = DEFAULT_CLOCK
) -> EncounterCode:
    if clock.day_of_epoch(epoch) != key.day_index:
        raise ProtocolError(
            f"epoch {epoch} outside window of key for day {key.day_index}"
        )
    enc = Cipher(algorithms.AES(_identifier_key(key.key_bytes)), modes.ECB()).encryptor()
    return EncounterCode(enc.update(_padded(epoch)), epoch)


@functools.lru_cache(maxsize=16384)
def _day_codes(key: TemporaryKey, clock: EpochClock) -> tuple[EncounterCode, ...]:
    epochs = clock.epoch_window(key.day_index)
    enc = Cipher(algorithms.AES(_identifier_key(key.key_bytes)), modes.ECB()).encryptor()
    blob = enc.update(b"".join(_padded(e) for e in epochs))
    return tuple(
        EncounterCode(blob[i * ID_LEN:(i + 1) * ID_LEN], e) for i, e in enumerate(epochs)
    )


def identifiers_for_key(
    key: TemporaryKey, clock: EpochClock = DEFAULT_CLOCK
) -> tuple[EncounterCode, ...]:
    """All identifiers a key produces over its window, in epoch order."""
    return _day_codes(key, clock)


class KeySchedule:
    """Per-device lazy map day_index -> TemporaryKey.

    Each day draws from its own child seed, so keys for distinct days are
    independent and do not depend on the order days are first requested.
    """

    def __init__(self, seed: np.random.SeedSequence | int, clock: EpochClock = DEFAULT_CLOCK):
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        self._seed = seed
        self.clock = clock
        self._keys: dict[int, TemporaryKey] = {}

    def key_for_day(self, day_index: int) -> TemporaryKey:
        key = self._keys.get(day_index)
        if key is None:
            child = np.random.SeedSequence(
                self._seed.entropy, spawn_key=self._seed.spawn_key + (day_index,)
            )
            key = TemporaryKey.generate(np.random.default_rng(child), day_index)
            self._keys[day_index] = key
        return key

    def code_at(self, sim_time: float) -> EncounterCode:
        epoch = self.clock.epoch_index(sim_time)
        return derive_identifier(self.key_for_day(self.clock.day_of_epoch(epoch)), epoch, self.clock)

    @property
    def days(self) -> list[int]:
        """Days whose key has been drawn so far."""
        return sorted(self._keys)

    def recent_keys(self, current_day: int, days: int = 14) -> list[TemporaryKey]:
        first = max(0, current_day - days + 1)
        return [self.key_for_day(d) for d in range(first, current_day + 1)]


@dataclass
class KeyDatabase:
    """Append-only store of (key, day) pairs published by diagnosed users."""

    clock: EpochClock = DEFAULT_CLOCK
    _entries: dict[tuple[bytes, int], TemporaryKey] = field(default_factory=dict, repr=False)

    def add(self, key: TemporaryKey) -> bool:
        ident = (key.key_bytes, key.day_index)
        if ident in self._entries:
            return False
        self._entries[ident] = key
        return True

    def extend(self, keys: Iterable[TemporaryKey]) -> int:
        return sum(self.add(k) for k in keys)

    def __len__(self):
        return len(self._entries)

    def __iter__(self) -> Iterator[TemporaryKey]:
        return iter(list(self._entries.values()))

    def __contains__(self, key: TemporaryKey):
        return (key.key_bytes, key.day_index) in self._entries

    def snapshot(self) -> "KeyDatabase":
        return KeyDatabase(self.clock, dict(self._entries))

    def identifiers(self) -> dict[bytes, EncounterCode]:
        out = {}
        for key in self._entries.values():
            for code in identifiers_for_key(key, self.clock):
                out[code.id_bytes] = code
        return out

    def dump(self, fp: IO[str]) -> None:
        for key in self._entries.values():
            fp.write(f"{key.hex()},{key.day_index}\n")

    @classmethod
    def load(cls, fp: IO[str], clock: EpochClock = DEFAULT_CLOCK) -> "KeyDatabase":
        db = cls(clock)
        for lineno, line in enumerate(fp, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                hex_key, day = line.split(",")
                db.add(TemporaryKey(bytes.fromhex(hex_key.strip()), int(day)))
            except ValueError as exc:
                raise ProtocolError(f"line {lineno}: {exc}") from None
        return db


@dataclass(frozen=True)
class ExposureParams:
    max_distance: float = 5.0
    min_dwell: float = 1.0

    def __post_init__(self):
        if self.max_distance <= 0 or self.min_dwell <= 0:
            raise ProtocolError("max_distance and min_dwell must be positive")


def match_exposures(records, db: KeyDatabase | Iterable[TemporaryKey], params: ExposureParams = ExposureParams()):
    """Codes among ``records`` that derive from a published key and pass the
    distance/dwell thresholds.  Matching compares identifier bytes only, as a
    receiver would."""
    if isinstance(db, KeyDatabase):
        published = db.identifiers()
    else:
        published = {}
        for key in db:
            for code in identifiers_for_key(key):
                published[code.id_bytes] = code
    if not published:
        return set()
    return {
        r.code
        for r in records
        if r.code.id_bytes in published
        and r.distance <= params.max_distance
        and r.dwell >= params.min_dwell
    }
