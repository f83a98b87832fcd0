"""
How much of a city could sensors at its points of interest reach?

Each POI contributes its unique monthly visitors.  Nearby POIs share
visitors, so for every ordered pair within ``r`` km the first record loses
``p/2 * min(raw_i, raw_j)``.  Records driven to zero or below leave the
list at the end of their own pass and no longer count against later
records.  Coverage is the surviving visitor total over the population.
"""

from __future__ import annotations

import ast
import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS_KM = 6371.0

POI_COLUMNS = ("location_name", "brands", "street_address", "latitude", "longitude", "city",
               "raw_counts", "visits_by_day")
# SafeGraph's own header for the monthly unique-visitor column
_RAW_ALIASES = ("raw_counts", "raw_visitor_counts")


class CoordinateError(ValueError):
    pass


class CoverageError(ValueError):
    pass


def _check(lat, lon):
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0) or math.isnan(lat + lon):
        raise CoordinateError(f"invalid coordinate ({lat}, {lon})")


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    _check(lat1, lon1)
    _check(lat2, lon2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_many(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised haversine over broadcastable degree arrays (no validation)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class PoiRecord:
    location_name: str
    latitude: float
    longitude: float
    city: str
    raw_counts: int
    visits_by_day: tuple[int, ...] = ()
    brands: str = ""
    street_address: str = ""
    visitor_counts: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        _check(self.latitude, self.longitude)
        if self.raw_counts < 0:
            raise CoverageError(f"{self.location_name}: negative raw_counts")
        self.visits_by_day = tuple(int(v) for v in self.visits_by_day)
        if self.visitor_counts is None:
            self.visitor_counts = float(self.raw_counts)

    @property
    def total_visits(self) -> int:
        return sum(self.visits_by_day)


@dataclass(frozen=True)
class CoverageParams:
    p: float
    r: float
    population: int

    def __post_init__(self):
        if self.population <= 0:
            raise CoverageError("population must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise CoverageError("overlap p must lie in [0, 1]")
        if self.r < 0:
            raise CoverageError("radius must be non-negative")


def city_records(records: Iterable[PoiRecord], city: str) -> list[PoiRecord]:
    out = [r for r in records if r.city == city]
    if not out:
        raise CoverageError(f"no records for city {city!r}")
    return out


class _Geometry:
    """Coordinates and a KD-tree on the unit sphere for radius queries."""

    def __init__(self, records: Sequence[PoiRecord]):
        self.lat = np.array([r.latitude for r in records])
        self.lon = np.array([r.longitude for r in records])
        self.raw = np.array([r.raw_counts for r in records], dtype=float)
        phi, lam = np.radians(self.lat), np.radians(self.lon)
        xyz = np.column_stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])
        self.tree = cKDTree(xyz)
        self._cache: dict[float, list[np.ndarray]] = {}

    def neighbours(self, r_km: float) -> list[np.ndarray]:
        """Per record, sorted indices of the other records within ``r_km``."""
        if r_km not in self._cache:
            # chord length for the arc, padded; exact haversine filters after
            chord = 2 * math.sin(min(r_km / EARTH_RADIUS_KM, math.pi) / 2) * (1 + 1e-9) + 1e-12
            lists = self.tree.query_ball_point(self.tree.data, chord, return_sorted=True)
            out = []
            for i, cand in enumerate(lists):
                cand = np.asarray(cand, dtype=np.int64)
                cand = cand[cand != i]
                d = haversine_many(self.lat[i], self.lon[i], self.lat[cand], self.lon[cand])
                out.append(cand[d <= r_km])
            self._cache[r_km] = out
        return self._cache[r_km]

    def run(self, p: float, r_km: float) -> np.ndarray:
        """Final visitor counts; removed records are NaN."""
        visitors = self.raw.copy()
        alive = np.ones(len(visitors), dtype=bool)
        if p > 0:
            nbrs = self.neighbours(r_km)
            half = p / 2
            raw = self.raw
            for i in range(len(visitors)):
                nb = nbrs[i]
                if len(nb):
                    nb = nb[alive[nb]]
                    visitors[i] -= half * np.minimum(raw[i], raw[nb]).sum()
                if visitors[i] <= 0:
                    alive[i] = False
        else:
            alive &= visitors > 0
        visitors[~alive] = np.nan
        return visitors


def estimate_coverage(records: Iterable[PoiRecord], city: str, params: CoverageParams,
                      write_back: bool = False) -> float:
    recs = city_records(records, city)
    visitors = _Geometry(recs).run(params.p, params.r)
    if write_back:
        for rec, v in zip(recs, visitors.tolist()):
            rec.visitor_counts = 0.0 if math.isnan(v) else v
    return float(np.nansum(visitors)) / params.population


def coverage_sweep(records: Iterable[PoiRecord], city: str, population: int,
                   p_values: Sequence[float], r_values: Sequence[float]) -> np.ndarray:
    """Coverage matrix, rows indexed by p and columns by r."""
    if not len(p_values) or not len(r_values):
        raise CoverageError("empty sweep grid")
    recs = city_records(records, city)
    for p in p_values:
        for r in r_values:
            CoverageParams(p, r, population)
    geo = _Geometry(recs)
    out = np.empty((len(p_values), len(r_values)))
    for a, p in enumerate(p_values):
        for b, r in enumerate(r_values):
            out[a, b] = np.nansum(geo.run(p, r)) / population
    return out


def day_overlap(records: Iterable[PoiRecord]) -> float:
    """Aggregate 1 - sum(raw) / sum(visits) over records with visits."""
    raw, visits = _totals(records)
    return 1.0 - raw / visits


def average_frequency(records: Iterable[PoiRecord]) -> float:
    raw, visits = _totals(records)
    if raw == 0:
        raise CoverageError("no visitors")
    return visits / raw


def _totals(records):
    raw = visits = 0
    for r in records:
        v = r.total_visits
        if v <= 0:
            warnings.warn(f"{r.location_name}: no visits_by_day, skipped", stacklevel=3)
            continue
        raw += r.raw_counts
        visits += v
    if visits == 0:
        raise CoverageError("no record has visits")
    return raw, visits


def load_poi_csv(path_or_fp) -> list[PoiRecord]:
    fp = open(path_or_fp, newline="") if isinstance(path_or_fp, (str, bytes)) or hasattr(
        path_or_fp, "__fspath__") else path_or_fp
    try:
        reader = csv.DictReader(fp)
        fields = set(reader.fieldnames or ())
        raw_col = next((c for c in _RAW_ALIASES if c in fields), None)
        missing = {"location_name", "latitude", "longitude", "city", "visits_by_day"} - fields
        if raw_col is None or missing:
            raise CoverageError(f"missing columns: {sorted(missing | ({'raw_counts'} if raw_col is None else set()))}")
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                visits = ast.literal_eval(row["visits_by_day"] or "[]")
                out.append(PoiRecord(
                    location_name=row["location_name"],
                    brands=row.get("brands", "") or "",
                    street_address=row.get("street_address", "") or "",
                    latitude=float(row["latitude"]),
                    longitude=float(row["longitude"]),
                    city=row["city"],
                    raw_counts=int(float(row[raw_col])),
                    visits_by_day=tuple(visits),
                ))
            except (ValueError, SyntaxError, TypeError) as exc:
                raise CoverageError(f"line {lineno}: {exc}") from None
        return out
    finally:
        if fp is not path_or_fp:
            fp.close()


def write_poi_csv(records: Iterable[PoiRecord], fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(POI_COLUMNS)
    for r in records:
        w.writerow([r.location_name, r.brands, r.street_address, f"{r.latitude:.6f}",
                    f"{r.longitude:.6f}", r.city, r.raw_counts,
                    "[" + ",".join(map(str, r.visits_by_day)) + "]"])


def synthetic_city(city: str, sites: int, center: tuple[float, float], radius_km: float,
                   seed: int = 0, frequency: float = 1.58, days: int = 30, cluster_size: int = 50,
                   cluster_spread_km: float = 3.0, sigma: float = 2.0) -> list[PoiRecord]:
    """Clustered POIs with heavy-tailed visitor counts.

    Visits per record are ``frequency`` times its unique visitors, spread
    over ``days`` days.
    """
    rng = np.random.default_rng(seed)
    n_clusters = max(1, sites // cluster_size)
    c_r = radius_km * np.sqrt(rng.uniform(size=n_clusters))
    c_t = rng.uniform(0, 2 * np.pi, size=n_clusters)
    which = rng.integers(0, n_clusters, size=sites)
    spread = rng.exponential(cluster_spread_km, size=n_clusters)[which]
    dx = c_r[which] * np.cos(c_t[which]) + rng.normal(0, 1, size=sites) * spread
    dy = c_r[which] * np.sin(c_t[which]) + rng.normal(0, 1, size=sites) * spread
    lat = center[0] + dy / 111.2
    lon = center[1] + dx / (111.2 * math.cos(math.radians(center[0])))
    raw = np.maximum(1, np.round(rng.lognormal(5.0, sigma, size=sites))).astype(np.int64)
    return _with_visits(city, lat, lon, raw, rng, frequency, days)


def _with_visits(city, lat, lon, raw, rng, frequency, days):
    out = []
    for k in range(len(raw)):
        total = int(round(raw[k] * frequency))
        share = rng.dirichlet(np.ones(days))
        visits = np.floor(share * total).astype(np.int64)
        visits[: total - visits.sum()] += 1
        out.append(PoiRecord(f"{city.lower()}-poi-{k:05d}", float(lat[k]), float(lon[k]), city,
                             int(raw[k]), tuple(visits.tolist())))
    return out


def calibrate(records: list[PoiRecord], city: str, population: int, target: float,
              p: float, r: float) -> list[PoiRecord]:
    """Rescale visitor counts so coverage at (p, r) hits ``target``.

    Decrements are linear in the counts and removal only depends on sign, so
    coverage scales linearly with a common factor; rounding to whole
    visitors leaves a small residue.
    """
    base = estimate_coverage(records, city, CoverageParams(p, r, population))
    if base <= 0:
        raise CoverageError("fixture has zero coverage at the calibration point")
    factor = target / base
    out = []
    for rec in records:
        raw = max(1, int(round(rec.raw_counts * factor)))
        freq = rec.total_visits / rec.raw_counts if rec.raw_counts else 1.0
        total = int(round(raw * freq))
        visits = np.zeros(len(rec.visits_by_day) or 1, dtype=np.int64)
        if rec.total_visits:
            visits = np.floor(np.array(rec.visits_by_day) * total / rec.total_visits).astype(np.int64)
        visits[: total - visits.sum()] += 1
        out.append(PoiRecord(rec.location_name, rec.latitude, rec.longitude, rec.city, raw,
                             tuple(visits.tolist()), rec.brands, rec.street_address))
    return out


HOUSTON = dict(city="Houston", sites=10171, center=(29.7604, -95.3698), radius_km=35.0,
               population=2_326_090)


def houston_like(seed: int = 0, target: float = 0.25) -> list[PoiRecord]:
    """Houston-sized synthetic fixture calibrated to ``target`` coverage at p=0.3, r=5 km."""
    recs = synthetic_city(HOUSTON["city"], HOUSTON["sites"], HOUSTON["center"],
                          HOUSTON["radius_km"], seed)
    return calibrate(recs, HOUSTON["city"], HOUSTON["population"], target, 0.3, 5.0)
