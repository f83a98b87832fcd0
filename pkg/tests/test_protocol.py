import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlab.protocol import (
    DEFAULT_CLOCK,
    EncounterCode,
    EpochClock,
    ExposureParams,
    KeyDatabase,
    KeySchedule,
    ProtocolError,
    TemporaryKey,
    derive_identifier,
    identifiers_for_key,
    match_exposures,
)
from ctlab.world.model import EncounterRecord

# Frozen from an independent HKDF built on stdlib hmac plus a raw AES block.
GOLDEN = [
    (bytes(16), 0, "f252a8a76c6012a86337d54f914b53b5"),
    (bytes(16), 95, "fceb9262a481b9eeee2459eb77e902bb"),
    (bytes(range(16)), 2700, "6a5b2a32c3540b15e3de86bb9e27d28e"),
]


@pytest.mark.parametrize("key, epoch, expected", GOLDEN)
def test_golden_vectors(key, epoch, expected):
    tk = TemporaryKey(key, DEFAULT_CLOCK.day_of_epoch(epoch))
    assert derive_identifier(tk, epoch).hex() == expected


def test_clock_geometry():
    clock = EpochClock()
    assert clock.epochs_per_key == 96
    assert clock.epoch_index(899.9) == 0
    assert clock.epoch_index(900.0) == 1
    assert clock.day_index(86399.9) == 0
    assert clock.day_index(86400.0) == 1
    assert list(clock.epoch_window(1))[:2] == [96, 97]


def test_clock_rejects_ragged_period():
    with pytest.raises(ProtocolError):
        EpochClock(epoch_len=7, key_period=100)


def test_derivation_outside_key_window_raises():
    key = TemporaryKey(bytes(16), 0)
    with pytest.raises(ProtocolError):
        derive_identifier(key, 96)


def test_bad_lengths():
    with pytest.raises(ProtocolError):
        TemporaryKey(b"short", 0)
    with pytest.raises(ProtocolError):
        EncounterCode(b"\x00" * 15, 0)


@given(st.binary(min_size=16, max_size=16), st.integers(0, 95))
def test_derivation_is_deterministic(key, epoch):
    tk = TemporaryKey(key, 0)
    assert derive_identifier(tk, epoch) == derive_identifier(TemporaryKey(key, 0), epoch)


@given(st.binary(min_size=16, max_size=16))
@settings(max_examples=30)
def test_one_identifier_per_epoch(key):
    codes = identifiers_for_key(TemporaryKey(key, 3))
    assert len(codes) == 96
    assert [c.epoch_index for c in codes] == list(range(288, 384))
    assert len({c.id_bytes for c in codes}) == 96


def test_bt_mac_is_locally_administered():
    code = derive_identifier(TemporaryKey(bytes(16), 0), 0)
    assert code.bt_mac >> 46 == 1
    assert code.bt_mac < 1 << 48


def test_schedule_rotation_boundaries():
    ks = KeySchedule(42)
    assert ks.code_at(0.0) == ks.code_at(899.9)
    assert ks.code_at(899.9) != ks.code_at(900.0)
    assert ks.key_for_day(0) != ks.key_for_day(1)
    assert ks.code_at(86399.0).epoch_index == 95
    assert ks.code_at(86400.0) == derive_identifier(ks.key_for_day(1), 96)


def test_schedule_reproducible_from_seed():
    a, b = KeySchedule(5), KeySchedule(5)
    assert a.code_at(12345.0) == b.code_at(12345.0)
    assert KeySchedule(6).code_at(12345.0) != a.code_at(12345.0)


def test_recent_keys_window():
    ks = KeySchedule(1)
    keys = ks.recent_keys(20, days=14)
    assert [k.day_index for k in keys] == list(range(7, 21))
    assert [k.day_index for k in ks.recent_keys(3)] == [0, 1, 2, 3]


def test_key_database_dedup_and_roundtrip():
    ks = KeySchedule(9)
    db = KeyDatabase()
    assert db.extend(ks.recent_keys(2)) == 3
    assert db.extend(ks.recent_keys(2)) == 0
    buf = io.StringIO()
    db.dump(buf)
    buf.seek(0)
    back = KeyDatabase.load(buf)
    assert sorted(k.hex() for k in back) == sorted(k.hex() for k in db)
    assert len(back.identifiers()) == 3 * 96


def test_key_database_load_reports_line():
    with pytest.raises(ProtocolError, match="line 2"):
        KeyDatabase.load(io.StringIO("00" * 16 + ",0\nnot-a-key\n"))


def _record(code, distance, dwell):
    return EncounterRecord(code, 0.0, distance, dwell, receiver=0)


def test_match_thresholds():
    ks = KeySchedule(3)
    code = ks.code_at(100.0)
    db = KeyDatabase()
    db.add(ks.key_for_day(0))
    assert match_exposures([_record(code, 5.0, 1.0)], db) == {code}
    assert match_exposures([_record(code, 5.01, 1.0)], db) == set()
    assert match_exposures([_record(code, 2.0, 0.5)], db) == set()
    assert match_exposures([_record(code, 2.0, 3.0)], []) == set()


def test_match_compares_bytes_not_epoch_label():
    ks = KeySchedule(3)
    code = ks.code_at(100.0)
    relabelled = EncounterCode(code.id_bytes, code.epoch_index + 7)
    assert match_exposures([_record(relabelled, 1.0, 2.0)], [ks.key_for_day(0)]) == {relabelled}


def test_exposure_params_validation():
    with pytest.raises(ProtocolError):
        ExposureParams(max_distance=0)


def test_zero_collisions_over_1e5_derivations():
    rng = np.random.default_rng(2024)
    seen = set()
    n = 0
    for day in range(1042):
        for code in identifiers_for_key(TemporaryKey.generate(rng, day)):
            seen.add(code.id_bytes)
            n += 1
    assert n >= 100_000
    assert len(seen) == n


def brute_force_match(records, keys, params):
    out = set()
    for r in records:
        if r.distance > params.max_distance or r.dwell < params.min_dwell:
            continue
        for k in keys:
            for e in DEFAULT_CLOCK.epoch_window(k.day_index):
                if derive_identifier(k, e).id_bytes == r.code.id_bytes:
                    out.add(r.code)
    return out


def test_match_exposures_against_brute_force():
    rnd = random.Random(11)
    schedules = [KeySchedule(s) for s in range(6)]
    published = [ks.key_for_day(d) for ks in schedules[:3] for d in (0, 1)]
    records = []
    for _ in range(1000):
        ks = rnd.choice(schedules)
        t = rnd.uniform(0, 2 * 86400 - 1)
        if rnd.random() < 0.1:
            code = EncounterCode(rnd.randbytes(16), DEFAULT_CLOCK.epoch_index(t))
        else:
            code = ks.code_at(t)
        records.append(_record(code, rnd.uniform(0, 10), rnd.uniform(0, 3)))
    params = ExposureParams()
    expected = brute_force_match(records, published, params)
    assert expected
    assert match_exposures(records, published, params) == expected
    db = KeyDatabase()
    db.extend(published)
    assert match_exposures(records, db, params) == expected
