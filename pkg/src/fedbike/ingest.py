"""Trip-log ingestion: parsing, cleaning, hourly aggregation, client partitioning.

Trips are held column-wise in a :class:`TripTable` (numpy arrays), with
:class:`Trip` as the row view.  Timestamps are naive local time stored as
``datetime64[s]``; no timezone conversion is ever applied.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

HOUR = np.timedelta64(1, "h")
DEFAULT_SCHEMA = {
    "start_station": "start_station_id",
    "end_station": "end_station_id",
    "started_at": "started_at",
    "ended_at": "ended_at",
}
DEFAULT_TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"
DEFAULT_N_CLIENTS = 8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class SchemaError(ValueError):
    """A required column is missing from the trip file header."""


class PartitionError(ValueError):
    """A client mapping is incomplete or out of range."""


@dataclass(frozen=True)
class Trip:
    start_station: str
    end_station: str
    t_start: np.datetime64
    t_end: np.datetime64


@dataclass
class TripTable:
    """Column-oriented trip records."""

    start_station: np.ndarray
    end_station: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    n_malformed: int = 0

    def __post_init__(self):
        self.start_station = np.asarray(self.start_station, dtype=object)
        self.end_station = np.asarray(self.end_station, dtype=object)
        self.t_start = np.asarray(self.t_start, dtype="datetime64[s]")
        self.t_end = np.asarray(self.t_end, dtype="datetime64[s]")
        n = len(self.start_station)
        if not (len(self.end_station) == len(self.t_start) == len(self.t_end) == n):
            raise ValueError("trip columns must have equal length")

    @classmethod
    def empty(cls) -> TripTable:
        return cls([], [], [], [])

    @classmethod
    def from_trips(cls, trips: Iterable[Trip]) -> TripTable:
        trips = list(trips)
        return cls(
            [t.start_station for t in trips],
            [t.end_station for t in trips],
            [t.t_start for t in trips],
            [t.t_end for t in trips],
        )

    def __len__(self) -> int:
        return len(self.start_station)

    def __getitem__(self, i: int) -> Trip:
        return Trip(self.start_station[i], self.end_station[i], self.t_start[i], self.t_end[i])

    def __iter__(self) -> Iterator[Trip]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask: np.ndarray) -> TripTable:
        return TripTable(
            self.start_station[mask], self.end_station[mask], self.t_start[mask], self.t_end[mask]
        )

    @property
    def duration(self) -> np.ndarray:
        return self.t_end - self.t_start


@dataclass
class CleanReport:
    n_input: int = 0
    negative_duration: int = 0
    duration: int = 0
    short_roundtrip: int = 0
    inactive_station: int = 0
    n_retained: int = 0
    n_stations_input: int = 0
    n_stations_retained: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DemandSeries:
    """Hourly (arrivals, departures) counts for one station on a contiguous grid."""

    station: str
    t0: np.datetime64
    arrivals: np.ndarray
    departures: np.ndarray
    step: np.timedelta64 = field(default=HOUR)

    def __post_init__(self):
        self.t0 = np.datetime64(self.t0, "h")
        self.arrivals = np.asarray(self.arrivals, dtype=np.int64)
        self.departures = np.asarray(self.departures, dtype=np.int64)
        if self.arrivals.shape != self.departures.shape or self.arrivals.ndim != 1:
            raise ValueError("arrivals and departures must be 1-d and equally long")
        if len(self.arrivals) < 1:
            raise ValueError("a demand series needs at least one interval")
        if (self.arrivals < 0).any() or (self.departures < 0).any():
            raise ValueError("demand counts must be non-negative")

    def __len__(self) -> int:
        return len(self.arrivals)

    @property
    def timestamps(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.step

    def target(self, kind: str) -> np.ndarray:
        if kind == "arrivals":
            return self.arrivals
        if kind == "departures":
            return self.departures
        raise ValueError(f"unknown target kind {kind!r}")


@dataclass(frozen=True)
class ClientPartition:
    n_clients: int
    assignment: Mapping[str, int]

    def clients(self) -> dict[int, list[str]]:
        """Client index -> sorted station ids (empty clients included)."""
        out: dict[int, list[str]] = {c: [] for c in range(self.n_clients)}
        for station, c in self.assignment.items():
            out[c].append(station)
        return {c: sorted(s) for c, s in out.items()}


@dataclass(frozen=True)
class TemporalSplit:
    """Hour-index boundaries: train ``[0, train_end)``, valid ``[train_end, valid_end)``,
    test ``[valid_end, length)``."""

    train_end: int
    valid_end: int
    length: int

    def part(self, name: str) -> tuple[int, int]:
        return {
            "train": (0, self.train_end),
            "valid": (self.train_end, self.valid_end),
            "test": (self.valid_end, self.length),
        }[name]

    def timestamps(self, t0: np.datetime64) -> tuple[np.datetime64, np.datetime64]:
        t0 = np.datetime64(t0, "h")
        return t0 + self.train_end * HOUR, t0 + self.valid_end * HOUR


def _parse_time(value: str, fmt: str) -> np.datetime64:
    value = value.strip()
    try:
        return np.datetime64(datetime.strptime(value, fmt), "s")
    except ValueError:
        pass
    alt = fmt.replace("T", " ") if "T" in fmt else fmt.replace(" ", "T")
    try:
        return np.datetime64(datetime.strptime(value, alt), "s")
    except ValueError:
        pass
    # fractional seconds and other ISO variants seen in public trip dumps
    return np.datetime64(datetime.fromisoformat(value).replace(tzinfo=None), "s")


def parse_trips(
    source,
    schema: Mapping[str, str] | None = None,
    time_format: str = DEFAULT_TIME_FORMAT,
    delimiter: str = ",",
) -> TripTable:
    """Read delimited trip records.

    ``source`` is a path, a binary stream or a text stream.  ``schema`` maps the
    four logical columns (start_station, end_station, started_at, ended_at) to
    header names.  Rows with empty fields or unparseable timestamps are skipped
    and counted in ``TripTable.n_malformed``.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    missing_keys = set(DEFAULT_SCHEMA) - set(schema)
    if missing_keys:
        raise SchemaError(f"schema lacks logical columns {sorted(missing_keys)}")

    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return parse_trips(fh, schema, time_format, delimiter)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8-sig", newline="")

    reader = csv.reader(text, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("trip file has no header row") from None
    idx = {}
    for key in ("start_station", "end_station", "started_at", "ended_at"):
        col = schema[key]
        if col not in header:
            raise SchemaError(f"column {col!r} ({key}) not in header {header}")
        idx[key] = header.index(col)

    start, end, t0, t1 = [], [], [], []
    n_bad = 0
    width = max(idx.values()) + 1
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < width:
            n_bad += 1
            continue
        s, e = row[idx["start_station"]].strip(), row[idx["end_station"]].strip()
        a, b = row[idx["started_at"]], row[idx["ended_at"]]
        if not s or not e or not a.strip() or not b.strip():
            n_bad += 1
            continue
        try:
            ta, tb = _parse_time(a, time_format), _parse_time(b, time_format)
        except ValueError:
            logger.debug("line %d: bad timestamp %r / %r", lineno, a, b)
            n_bad += 1
            continue
        start.append(s)
        end.append(e)
        t0.append(ta)
        t1.append(tb)
    if n_bad:
        logger.info("skipped %d malformed trip rows", n_bad)
    table = TripTable(start, end, t0, t1)
    table.n_malformed = n_bad
    return table


def clean_trips(
    trips: TripTable,
    min_roundtrip: np.timedelta64 = np.timedelta64(120, "s"),
    max_duration: np.timedelta64 = np.timedelta64(24, "h"),
    min_daily_rentals: float = 3.0,
) -> tuple[TripTable, set[str], CleanReport]:
    """Drop implausible trips, then every trip touching a low-activity station.

    Activity is departures per day over the station's active span (first to last
    event touching it, at least one day).
    """
    report = CleanReport(n_input=len(trips))
    if len(trips) == 0:
        return TripTable.empty(), set(), report

    report.n_stations_input = len(set(trips.start_station) | set(trips.end_station))
    dur = trips.duration
    negative = dur < np.timedelta64(0, "s")
    too_long = ~negative & (dur > max_duration)
    roundtrip = (
        ~negative & ~too_long & (trips.start_station == trips.end_station) & (dur < min_roundtrip)
    )
    report.negative_duration = int(negative.sum())
    report.duration = int(too_long.sum())
    report.short_roundtrip = int(roundtrip.sum())
    kept = trips.select(~(negative | too_long | roundtrip))

    stations = np.concatenate([kept.start_station, kept.end_station])
    times = np.concatenate([kept.t_start, kept.t_end])
    uniq, inv = np.unique(stations, return_inverse=True)
    ts = times.astype(np.int64)
    lo = np.full(len(uniq), np.iinfo(np.int64).max)
    hi = np.full(len(uniq), np.iinfo(np.int64).min)
    np.minimum.at(lo, inv, ts)
    np.maximum.at(hi, inv, ts)
    span_days = np.maximum((hi - lo) / 86400.0, 1.0)
    departures = np.bincount(inv[: len(kept)], minlength=len(uniq))
    rate = departures / span_days
    active = set(uniq[rate >= min_daily_rentals].tolist())

    both = np.fromiter(
        (s in active and e in active for s, e in zip(kept.start_station, kept.end_station)),
        dtype=bool,
        count=len(kept),
    )
    report.inactive_station = int((~both).sum())
    out = kept.select(both)
    report.n_retained = len(out)
    report.n_stations_retained = len(active)
    return out, active, report


def aggregate_demand(
    trips: TripTable,
    stations: Iterable[str],
    step: np.timedelta64 = HOUR,
    grid: tuple[np.datetime64, int] | None = None,
) -> dict[str, DemandSeries]:
    """Hourly arrival/departure counts on one grid shared by all stations.

    The grid runs from the floor-hour of the earliest event to the hour
    containing the latest event, unless ``grid=(t0, length)`` is given.
    """
    if step != HOUR:
        raise ValueError("only a one-hour step is supported")
    stations = sorted(set(stations))
    if not stations:
        raise ValueError("no stations requested")
    if grid is None:
        if len(trips) == 0:
            raise ValueError("cannot infer a time grid without trips; pass grid=(t0, length)")
        all_t = np.concatenate([trips.t_start, trips.t_end]).astype("datetime64[h]")
        t0 = all_t.min()
        length = int((all_t.max() - t0) // HOUR) + 1
    else:
        t0, length = np.datetime64(grid[0], "h"), int(grid[1])

    pos = {s: i for i, s in enumerate(stations)}
    counts = np.zeros((2, len(stations), length), dtype=np.int64)
    for row, (col_station, col_time) in enumerate(
        ((trips.end_station, trips.t_end), (trips.start_station, trips.t_start))
    ):
        sidx = np.fromiter((pos.get(s, -1) for s in col_station), dtype=np.int64, count=len(trips))
        hidx = ((col_time.astype("datetime64[h]") - t0) // HOUR).astype(np.int64)
        ok = (sidx >= 0) & (hidx >= 0) & (hidx < length)
        np.add.at(counts[row], (sidx[ok], hidx[ok]), 1)
    return {
        s: DemandSeries(s, t0, counts[0, i], counts[1, i]) for i, s in enumerate(stations)
    }


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def partition_clients(
    stations: Iterable[str],
    n_clients: int = DEFAULT_N_CLIENTS,
    mode: str = "hash",
    mapping: Mapping[str, int] | None = None,
) -> ClientPartition:
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    stations = sorted(set(stations))
    if mode == "hash":
        return ClientPartition(n_clients, {s: fnv1a_64(s) % n_clients for s in stations})
    if mode != "file":
        raise PartitionError(f"unknown partition mode {mode!r}")
    if mapping is None:
        raise PartitionError("file mode needs a mapping")
    missing = [s for s in stations if s not in mapping]
    if missing:
        raise PartitionError(f"mapping lacks stations {missing[:5]}")
    bad = {s: c for s, c in mapping.items() if s in set(stations) and not 0 <= int(c) < n_clients}
    if bad:
        raise PartitionError(f"client index out of range for {sorted(bad)[:5]}")
    return ClientPartition(n_clients, {s: int(mapping[s]) for s in stations})


def load_partition_file(path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return {str(k): int(v) for k, v in data.items()}


def temporal_split(series_len: int, fractions=(0.7, 0.2, 0.1)) -> TemporalSplit:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1: {fractions}")
    if series_len < 10:
        raise ValueError("series too short to split (need >= 10 hours)")
    train_end = int(np.floor(fractions[0] * series_len + 1e-9))
    valid_end = int(np.floor((fractions[0] + fractions[1]) * series_len + 1e-9))
    if not 0 < train_end < valid_end < series_len:
        raise ValueError(
            f"split {fractions} of {series_len} hours leaves an empty part "
            f"({train_end}, {valid_end})"
        )
    return TemporalSplit(train_end, valid_end, series_len)


# -- demand store --------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_demand_store(directory, series: Mapping[str, DemandSeries], report: CleanReport | None = None) -> None:
    """Write ``demand.csv`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stations = sorted(series)
    first = series[stations[0]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station_id", "hour_index", "timestamp", "arrivals", "departures"])
    for s in stations:
        ds = series[s]
        if ds.t0 != first.t0 or len(ds) != len(first):
            raise ValueError("all stations must share one grid")
        stamps = np.datetime_as_string(ds.timestamps, unit="s")
        for i in range(len(ds)):
            w.writerow([s, i, stamps[i], int(ds.arrivals[i]), int(ds.departures[i])])
    _atomic_write_text(directory / "demand.csv", buf.getvalue())
    manifest = {
        "t0": str(np.datetime_as_string(first.t0, unit="s")),
        "step_hours": 1,
        "length": len(first),
        "stations": stations,
        "clean_report": report.to_dict() if report is not None else None,
    }
    _atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_demand_store(directory) -> tuple[dict[str, DemandSeries], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    length = manifest["length"]
    t0 = np.datetime64(manifest["t0"], "h")
    arr = {s: np.zeros(length, np.int64) for s in manifest["stations"]}
    dep = {s: np.zeros(length, np.int64) for s in manifest["stations"]}
    with open(directory / "demand.csv", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            s, i = row["station_id"], int(row["hour_index"])
            arr[s][i] = int(row["arrivals"])
            dep[s][i] = int(row["departures"])
    series = {s: DemandSeries(s, t0, arr[s], dep[s]) for s in manifest["stations"]}
    return series, manifest
