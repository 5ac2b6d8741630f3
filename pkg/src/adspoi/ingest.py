"""Check-in ingestion: raw file parsers, cleaning, leave-one-out splits, dataset files."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import container

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
DATASET_MAGIC = b"ADSPOIDS"


class InputError(OSError):
    """A raw input file could not be read at all."""


@dataclass(frozen=True, slots=True)
class CheckIn:
    user_id: int
    poi_id: int
    timestamp: int
    lat: float
    lon: float

    def is_valid(self) -> bool:
        return (
            self.timestamp > 0
            and math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0
            and math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0
        )


class Parsed(NamedTuple):
    checkins: list[CheckIn]
    skipped: int


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points given in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised :func:`haversine`."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lat1, lon1, lat2, lon2))
    h = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


# --------------------------------------------------------------------------
# parsers


def _read_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def parse_foursquare(path) -> Parsed:
    """Parse the Foursquare TSV dump (user, venue, category id, category, lat, lon, tz offset, UTC time).

    Venue ids are hex strings; they are interned to integers in order of
    first appearance so the same file always yields the same ids.
    """
    venues: dict[str, int] = {}
    out: list[CheckIn] = []
    skipped = 0
    for line in _read_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 8:
                raise ValueError("field count")
            user = int(parts[0])
            lat, lon = float(parts[4]), float(parts[5])
            ts = int(datetime.strptime(parts[7].strip(), "%a %b %d %H:%M:%S %z %Y").timestamp())
        except ValueError:
            skipped += 1
            continue
        if not CheckIn(user, 0, ts, lat, lon).is_valid():
            skipped += 1
            continue
        poi = venues.setdefault(parts[1].strip(), len(venues))
        out.append(CheckIn(user, poi, ts, lat, lon))
    if skipped:
        log.warning("%s: skipped %d malformed foursquare line(s)", path, skipped)
    return Parsed(out, skipped)


def parse_gowalla(path) -> Parsed:
    """Parse the Gowalla TSV dump (user, ISO-8601 time, lat, lon, location id)."""
    out: list[CheckIn] = []
    skipped = 0
    for line in _read_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 5:
                raise ValueError("field count")
            stamp = datetime.strptime(parts[1].strip(), "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
            ci = CheckIn(int(parts[0]), int(parts[4]), int(stamp.timestamp()), float(parts[2]), float(parts[3]))
        except ValueError:
            skipped += 1
            continue
        if not ci.is_valid():
            skipped += 1
            continue
        out.append(ci)
    if skipped:
        log.warning("%s: skipped %d malformed gowalla line(s)", path, skipped)
    return Parsed(out, skipped)


PARSERS = {"foursquare": parse_foursquare, "gowalla": parse_gowalla}


# --------------------------------------------------------------------------
# cleaning


def _by_user(checkins: Iterable[CheckIn]) -> dict[int, list[CheckIn]]:
    users: dict[int, list[CheckIn]] = defaultdict(list)
    for ci in checkins:
        users[ci.user_id].append(ci)
    for seq in users.values():
        seq.sort(key=lambda c: (c.timestamp, c.poi_id))
    return users


def _dedupe(seq: list[CheckIn]) -> list[CheckIn]:
    # drops repeats of the previous POI and events that do not advance the clock
    out: list[CheckIn] = []
    for ci in seq:
        if out and (ci.poi_id == out[-1].poi_id or ci.timestamp <= out[-1].timestamp):
            continue
        out.append(ci)
    return out


def preprocess(checkins: Iterable[CheckIn], min_user: int = 10, min_poi: int = 10) -> list[CheckIn]:
    """Clean raw check-ins.

    Drops invalid records, removes consecutive duplicates per user, then
    alternates the user-activity and POI-support filters (re-deduplicating
    in between) until nothing changes. Output is sorted by (user, time).
    """
    if min_user < 1 or min_poi < 1:
        raise ValueError("min_user and min_poi must be >= 1")
    users = _by_user(ci for ci in checkins if ci.is_valid())
    while True:
        before = sum(len(s) for s in users.values())
        users = {u: _dedupe(s) for u, s in users.items()}
        users = {u: s for u, s in users.items() if len(s) >= min_user}
        support = Counter(ci.poi_id for s in users.values() for ci in s)
        users = {u: [ci for ci in s if support[ci.poi_id] >= min_poi] for u, s in users.items()}
        users = {u: s for u, s in users.items() if s}
        after = sum(len(s) for s in users.values())
        if after == before:
            break
    return [ci for u in sorted(users) for ci in users[u]]


# --------------------------------------------------------------------------
# trajectories and splits


@dataclass
class Catalog:
    """The POI set. Model-side POI indices are positions in ``ids``."""

    ids: np.ndarray
    lat: np.ndarray
    lon: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self) -> dict[int, int]:
        return {int(p): i for i, p in enumerate(self.ids)}


@dataclass
class Trajectory:
    """One user's chronological events; ``poi`` holds catalog indices."""

    user_id: int
    poi: np.ndarray
    timestamp: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    gaps: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.poi = np.asarray(self.poi, dtype=np.int64)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        n = len(self.poi)
        gaps = np.zeros((n, 2))
        if n > 1:
            gaps[1:, 0] = np.diff(self.timestamp)
            gaps[1:, 1] = haversine_array(self.lat[:-1], self.lon[:-1], self.lat[1:], self.lon[1:])
        self.gaps = gaps

    def __len__(self) -> int:
        return len(self.poi)

    def __getitem__(self, sl: slice) -> "Trajectory":
        return Trajectory(self.user_id, self.poi[sl], self.timestamp[sl], self.lat[sl], self.lon[sl])

    def events(self, catalog: Catalog | None = None) -> list[CheckIn]:
        ids = self.poi if catalog is None else catalog.ids[self.poi]
        return [CheckIn(self.user_id, int(p), int(t), float(a), float(o))
                for p, t, a, o in zip(ids, self.timestamp, self.lat, self.lon)]

    def tail(self, n: int) -> "Trajectory":
        return self if len(self) <= n else self[len(self) - n:]


@dataclass
class RankingInstance:
    user_id: int
    context: Trajectory
    target: int
    query_time: int


@dataclass
class DatasetSplit:
    catalog: Catalog
    train: list[Trajectory]
    val: list[RankingInstance]
    test: list[RankingInstance]
    full: list[Trajectory]


def build_catalog(checkins: Iterable[CheckIn]) -> Catalog:
    first: dict[int, tuple[float, float]] = {}
    for ci in checkins:
        first.setdefault(ci.poi_id, (ci.lat, ci.lon))
    ids = np.array(sorted(first), dtype=np.int64)
    coords = np.array([first[int(p)] for p in ids], dtype=np.float64).reshape(-1, 2)
    return Catalog(ids, coords[:, 0].copy(), coords[:, 1].copy())


def trajectories(checkins: list[CheckIn], catalog: Catalog) -> list[Trajectory]:
    index = catalog.index_of()
    out = []
    for user, seq in sorted(_by_user(checkins).items()):
        out.append(Trajectory(
            user,
            [index[c.poi_id] for c in seq],
            [c.timestamp for c in seq],
            [c.lat for c in seq],
            [c.lon for c in seq],
        ))
    return out


def split_leave_one_out(checkins: list[CheckIn]) -> DatasetSplit:
    """Per user: last event is the test target, second-to-last the validation target."""
    catalog = build_catalog(checkins)
    full = trajectories(checkins, catalog)
    train, val, test = [], [], []
    for tr in full:
        n = len(tr)
        if n >= 3:
            train.append(tr[:n - 2])
            val.append(RankingInstance(tr.user_id, tr[:n - 2], int(tr.poi[n - 2]), int(tr.timestamp[n - 2])))
            test.append(RankingInstance(tr.user_id, tr[:n - 1], int(tr.poi[n - 1]), int(tr.timestamp[n - 1])))
        elif n == 2:
            train.append(tr)
    return DatasetSplit(catalog, train, val, test, full)


# --------------------------------------------------------------------------
# dataset files


def save_dataset(path, checkins: list[CheckIn], meta: dict | None = None) -> None:
    arrays = {
        "user": np.array([c.user_id for c in checkins], dtype=np.int64),
        "poi": np.array([c.poi_id for c in checkins], dtype=np.int64),
        "timestamp": np.array([c.timestamp for c in checkins], dtype=np.int64),
        "lat": np.array([c.lat for c in checkins], dtype=np.float64),
        "lon": np.array([c.lon for c in checkins], dtype=np.float64),
    }
    catalog = build_catalog(checkins)
    arrays.update(catalog_id=catalog.ids, catalog_lat=catalog.lat, catalog_lon=catalog.lon)
    header = {"kind": "checkins", "n_checkins": len(checkins), "n_pois": len(catalog),
              "n_users": len({c.user_id for c in checkins}), "meta": meta or {}}
    container.write(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> tuple[list[CheckIn], dict]:
    header, arrays = container.read(path, DATASET_MAGIC)
    checkins = [CheckIn(int(u), int(p), int(t), float(a), float(o)) for u, p, t, a, o in zip(
        arrays["user"], arrays["poi"], arrays["timestamp"], arrays["lat"], arrays["lon"])]
    return checkins, header


def dataset_fingerprint(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
