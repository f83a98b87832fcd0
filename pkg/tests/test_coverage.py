import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlab.coverage import (
    HOUSTON,
    CoordinateError,
    CoverageError,
    CoverageParams,
    PoiRecord,
    average_frequency,
    calibrate,
    coverage_sweep,
    day_overlap,
    estimate_coverage,
    haversine,
    houston_like,
    load_poi_csv,
    synthetic_city,
    write_poi_csv,
)

CITIES = {
    "houston": (29.7604, -95.3698),
    "chicago": (41.8781, -87.6298),
    "nyc": (40.7128, -74.0060),
    "london": (51.5074, -0.1278),
    "sydney": (-33.8688, 151.2093),
    "tokyo": (35.6762, 139.6503),
    "dallas": (32.7767, -96.7970),
}
# WGS84 geodesic distances in km, frozen from geographiclib
GEODESIC_KM = [
    ("houston", "chicago", 1513.965),
    ("nyc", "london", 5585.234),
    ("sydney", "tokyo", 7792.175),
    ("houston", "dallas", 360.983),
    ("london", "tokyo", 9582.151),
]


@pytest.mark.parametrize("a, b, km", GEODESIC_KM)
def test_haversine_close_to_geodesic(a, b, km):
    assert haversine(*CITIES[a], *CITIES[b]) == pytest.approx(km, rel=0.005)


def test_haversine_against_live_geodesic():
    geodesic = pytest.importorskip("geographiclib.geodesic").Geodesic.WGS84
    for a, b, km in GEODESIC_KM:
        assert geodesic.Inverse(*CITIES[a], *CITIES[b])["s12"] / 1000 == pytest.approx(km, abs=1e-3)


def test_haversine_basics():
    assert haversine(10.0, 20.0, 10.0, 20.0) == 0.0
    assert haversine(0, 0, 0, 180) == pytest.approx(math.pi * 6371.0)
    with pytest.raises(CoordinateError):
        haversine(91.0, 0, 0, 0)
    with pytest.raises(CoordinateError):
        haversine(0, 0, 0, 181.0)


@given(st.floats(-89, 89), st.floats(-179, 179), st.floats(-89, 89), st.floats(-179, 179))
def test_haversine_symmetric(a, b, c, d):
    assert haversine(a, b, c, d) == pytest.approx(haversine(c, d, a, b), abs=1e-9)


def rec(name, lat, lon, raw, visits=(), city="X"):
    return PoiRecord(name, lat, lon, city, raw, tuple(visits) or (raw,))


def brute_force(records, p, r, population):
    """Direct transcription of the overlap pass on plain lists."""
    v = [float(x.raw_counts) for x in records]
    removed = [False] * len(records)
    for i, a in enumerate(records):
        for j, b in enumerate(records):
            if i == j or removed[j]:
                continue
            if haversine(a.latitude, a.longitude, b.latitude, b.longitude) <= r:
                v[i] -= p / 2 * min(a.raw_counts, b.raw_counts)
        if v[i] <= 0:
            removed[i] = True
    return sum(x for x, gone in zip(v, removed) if not gone) / population


poi = st.builds(
    lambda lat, lon, raw: (lat, lon, raw),
    st.floats(29.70, 29.80), st.floats(-95.42, -95.32), st.integers(0, 500),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(poi, min_size=1, max_size=10), st.floats(0, 1), st.floats(0, 8))
def test_matches_brute_force(points, p, r):
    records = [rec(f"p{i}", *pt) for i, pt in enumerate(points)]
    got = estimate_coverage(records, "X", CoverageParams(p, r, 1000))
    assert got == pytest.approx(brute_force(records, p, r, 1000), rel=1e-9, abs=1e-12)


def test_worked_example():
    # two co-located sites and one 3 km away
    records = [rec("a", 29.76, -95.37, 100), rec("b", 29.76, -95.37, 40),
               rec("c", 29.787, -95.37, 10)]
    # a and b lose 0.15 * 40 each; c is outside 1 km
    assert estimate_coverage(records, "X", CoverageParams(0.3, 1.0, 150)) == pytest.approx(138 / 150)


def test_removed_records_do_not_count_later():
    records = [rec("a", 29.76, -95.37, 10), rec("b", 29.76, -95.37, 100),
               rec("c", 29.76, -95.37, 10)]
    # p = 1: a drops to 0 and leaves; b and c then only lose against each other
    assert estimate_coverage(records, "X", CoverageParams(1.0, 1.0, 1)) == pytest.approx(95 + 5)


def test_not_monotone_in_p_in_general():
    # a removal at higher p spares later records: coverage can rise with p
    # r1 and r2 sit 0.6 km either side of r0, 1.2 km apart
    step = 0.6 / 111.2
    records = [rec("r0", 29.76, -95.37, 10), rec("r1", 29.76 - step, -95.37, 100),
               rec("r2", 29.76 + step, -95.37, 10)]
    lo = estimate_coverage(records, "X", CoverageParams(0.9, 0.7, 1))
    hi = estimate_coverage(records, "X", CoverageParams(1.0, 0.7, 1))
    assert lo == pytest.approx(102.0)
    assert hi == pytest.approx(110.0)


def test_write_back():
    records = [rec("a", 29.76, -95.37, 100), rec("b", 29.76, -95.37, 40)]
    estimate_coverage(records, "X", CoverageParams(0.5, 1.0, 1), write_back=True)
    assert [r.visitor_counts for r in records] == [90.0, 30.0]


def test_params_validation():
    with pytest.raises(CoverageError):
        CoverageParams(1.5, 1, 10)
    with pytest.raises(CoverageError):
        CoverageParams(0.1, -1, 10)
    with pytest.raises(CoverageError):
        CoverageParams(0.1, 1, 0)
    with pytest.raises(CoverageError):
        estimate_coverage([rec("a", 0, 0, 1)], "Nowhere", CoverageParams(0, 1, 1))


def test_day_overlap_and_frequency():
    records = [rec("a", 0, 0, 10, [5, 5, 5, 5]), rec("b", 0, 0, 30, [30, 30])]
    assert day_overlap(records) == pytest.approx(1 - 40 / 80)
    assert average_frequency(records) == pytest.approx(2.0)
    with pytest.warns(UserWarning):
        day_overlap(records + [PoiRecord("z", 0, 0, "X", 3, ())])


def test_csv_roundtrip():
    records = synthetic_city("Testville", 20, (41.0, -87.0), 5.0, seed=1)
    buf = io.StringIO()
    write_poi_csv(records, buf)
    buf.seek(0)
    back = load_poi_csv(buf)
    assert [r.raw_counts for r in back] == [r.raw_counts for r in records]
    assert [r.visits_by_day for r in back] == [r.visits_by_day for r in records]


def test_csv_accepts_safegraph_header():
    text = ("location_name,latitude,longitude,city,raw_visitor_counts,visits_by_day\n"
            'x,29.7,-95.3,Houston,12,"[1,2,3]"\n')
    (r,) = load_poi_csv(io.StringIO(text))
    assert r.raw_counts == 12 and r.visits_by_day == (1, 2, 3)
    with pytest.raises(CoverageError):
        load_poi_csv(io.StringIO("location_name,latitude\nx,1\n"))


def fixtures():
    yield "houston", houston_like(), HOUSTON["population"]
    for seed in range(3):
        yield f"synthetic-{seed}", synthetic_city("X", 400, (41.88, -87.63), 15.0, seed=seed), 200_000
    yield "small", [rec("a", 29.76, -95.37, 100), rec("b", 29.76, -95.37, 40),
                    rec("c", 29.787, -95.37, 10)], 150


P_GRID = [0.0, 0.1, 0.2, 0.3, 0.5]
R_GRID = [0.5, 1.0, 2.0, 5.0]


@pytest.mark.parametrize("name, records, population", list(fixtures()), ids=lambda x: x if isinstance(x, str) else "")
def test_sweep_shape_on_fixtures(name, records, population):
    city = records[0].city
    m = coverage_sweep(records, city, population, P_GRID, R_GRID)
    assert np.all(m[0] == m[0, 0])
    assert np.all(np.diff(m, axis=0) <= 1e-12)
    assert np.all(np.diff(m, axis=1) <= 1e-12)


def test_houston_fixture_calibration():
    records = houston_like()
    assert len(records) == HOUSTON["sites"]
    cov = estimate_coverage(records, "Houston", CoverageParams(0.3, 5.0, HOUSTON["population"]))
    assert cov == pytest.approx(0.25, abs=0.03)
    assert 1.4 < average_frequency(records) < 1.8


def test_calibrate_hits_target():
    records = synthetic_city("X", 300, (41.88, -87.63), 10.0, seed=4)
    out = calibrate(records, "X", 100_000, 0.1, 0.2, 2.0)
    assert estimate_coverage(out, "X", CoverageParams(0.2, 2.0, 100_000)) == pytest.approx(0.1, rel=0.02)
