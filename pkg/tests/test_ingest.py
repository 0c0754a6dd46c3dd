import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from fedbike import ingest
from fedbike.ingest import Trip, TripTable
from fedbike.synthetic import synthetic_trips

T = np.datetime64


def table(rows):
    """Rows of (start, end, t_start, t_end) with ISO strings."""
    return TripTable.from_trips(Trip(a, b, T(s, "s"), T(e, "s")) for a, b, s, e in rows)


# -- parse_trips ---------------------------------------------------------------


def test_parse_single_row():
    text = b"start_station_id,started_at,end_station_id,ended_at\nA,2022-03-17T10:05:00,B,2022-03-17T10:25:00\n"
    trips = ingest.parse_trips(text)
    assert len(trips) == 1
    assert trips[0] == Trip("A", "B", T("2022-03-17T10:05:00"), T("2022-03-17T10:25:00"))
    assert trips.n_malformed == 0


def test_parse_counts_malformed_rows():
    text = (
        "start_station_id,started_at,end_station_id,ended_at\n"
        "A,2022-03-17T10:05:00,,2022-03-17T10:25:00\n"
        "A,not-a-time,B,2022-03-17T10:25:00\n"
        "A,2022-03-17T10:05:00\n"
        "A,2022-03-17 11:00:00,B,2022-03-17 11:30:00\n"
    )
    trips = ingest.parse_trips(io.StringIO(text))
    assert trips.n_malformed == 3
    assert list(trips.start_station) == ["A"]
    assert trips.t_start[0] == T("2022-03-17T11:00:00")


def test_parse_custom_schema_and_delimiter():
    text = b"from;to;s;e\nX;Y;2022/01/02 03:04:05;2022/01/02 03:14:05\n"
    schema = {"start_station": "from", "end_station": "to", "started_at": "s", "ended_at": "e"}
    trips = ingest.parse_trips(text, schema, time_format="%Y/%m/%d %H:%M:%S", delimiter=";")
    assert trips[0].t_end - trips[0].t_start == np.timedelta64(600, "s")


def test_parse_missing_column_is_schema_error():
    with pytest.raises(ingest.SchemaError, match="started_at"):
        ingest.parse_trips(b"start_station_id,end_station_id,ended_at\nA,B,2022-01-01T00:00:00\n")


def test_parse_unreadable_source(tmp_path):
    with pytest.raises(OSError):
        ingest.parse_trips(tmp_path / "absent.csv")


# -- clean_trips ---------------------------------------------------------------


def busy(station, day0="2022-01-01", n_days=2, per_day=5, dest="Z"):
    """Trips keeping a station comfortably above the activity threshold."""
    rows = []
    for d in range(n_days):
        for k in range(per_day):
            s = T(day0, "s") + np.timedelta64(d * 86400 + k * 3600, "s")
            rows.append((station, dest, str(s), str(s + np.timedelta64(600, "s"))))
    return rows


def test_clean_removes_long_trip():
    rows = busy("A", dest="B") + busy("B", dest="A")
    rows.append(("A", "B", "2022-01-01T00:00:00", "2022-01-02T01:00:00"))  # 25 h
    out, stations, rep = ingest.clean_trips(table(rows))
    assert rep.duration == 1
    assert len(out) == len(rows) - 1
    assert stations == {"A", "B"}


def test_clean_removes_short_roundtrip_only():
    rows = busy("A", dest="B") + busy("B", dest="A")
    rows.append(("A", "A", "2022-01-01T12:00:00", "2022-01-01T12:01:00"))  # 60 s round trip
    rows.append(("A", "A", "2022-01-01T13:00:00", "2022-01-01T13:05:00"))  # long enough
    rows.append(("A", "B", "2022-01-01T14:00:00", "2022-01-01T14:00:30"))  # short but not a round trip
    out, _, rep = ingest.clean_trips(table(rows), min_roundtrip=np.timedelta64(120, "s"))
    assert rep.short_roundtrip == 1
    assert len(out) == len(rows) - 1


def test_clean_removes_negative_duration():
    rows = busy("A", dest="B") + busy("B", dest="A")
    rows.append(("A", "B", "2022-01-01T12:00:00", "2022-01-01T11:00:00"))
    out, _, rep = ingest.clean_trips(table(rows))
    assert rep.negative_duration == 1 and rep.duration == 0
    assert (out.duration >= np.timedelta64(0, "s")).all()


def test_clean_drops_quiet_station():
    # C: 14 departures over 7 active days = 2/day
    rows = busy("A", n_days=7, dest="B") + busy("B", n_days=7, dest="A")
    for d in range(7):
        for k in range(2):
            s = T("2022-01-01T06:00:00") + np.timedelta64(d * 86400 + k * 7200, "s")
            rows.append(("C", "A", str(s), str(s + np.timedelta64(300, "s"))))
    rows.append(("A", "C", "2022-01-03T08:00:00", "2022-01-03T08:10:00"))
    out, stations, rep = ingest.clean_trips(table(rows))
    assert stations == {"A", "B"}
    assert rep.inactive_station == 15
    assert "C" not in set(out.start_station) | set(out.end_station)


def test_clean_empty_input():
    out, stations, rep = ingest.clean_trips(TripTable.empty())
    assert len(out) == 0 and stations == set() and rep.n_input == 0


def test_clean_report_tallies_add_up():
    trips = synthetic_trips(n_stations=6, n_days=10, seed=4)
    out, _, rep = ingest.clean_trips(trips)
    removed = rep.negative_duration + rep.duration + rep.short_roundtrip + rep.inactive_station
    assert rep.n_input == len(trips)
    assert rep.n_retained == len(out) == rep.n_input - removed


# -- aggregate_demand ----------------------------------------------------------


def test_aggregate_two_arrivals_same_hour():
    rows = [
        ("X", "S", "2022-01-01T09:50:00", "2022-01-01T10:05:00"),
        ("Y", "S", "2022-01-01T09:40:00", "2022-01-01T10:59:59"),
    ]
    series = ingest.aggregate_demand(table(rows), {"S", "X", "Y"})
    s = series["S"]
    i = int((T("2022-01-01T10", "h") - s.t0) // ingest.HOUR)
    assert (s.arrivals[i], s.departures[i]) == (2, 0)


def test_aggregate_single_trip():
    series = ingest.aggregate_demand(table([("A", "B", "2022-03-17T10:05:00", "2022-03-17T10:25:00")]), {"A", "B"})
    assert series["A"].t0 == T("2022-03-17T10", "h")
    assert len(series["A"]) == 1
    assert series["A"].departures[0] == 1 and series["A"].arrivals[0] == 0
    assert series["B"].arrivals[0] == 1 and series["B"].departures[0] == 0


def test_aggregate_station_without_trips_is_zero():
    rows = [("A", "B", "2022-03-17T10:05:00", "2022-03-17T12:25:00")]
    series = ingest.aggregate_demand(table(rows), {"A", "B", "Q"})
    assert len(series["Q"]) == 3
    assert series["Q"].arrivals.sum() == series["Q"].departures.sum() == 0


def test_aggregate_grid_shared():
    series = ingest.aggregate_demand(synthetic_trips(n_stations=5, n_days=3), [f"S{i:03d}" for i in range(5)])
    assert len({(s.t0, len(s)) for s in series.values()}) == 1


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_aggregate_conservation(seed, n_stations):
    trips = synthetic_trips(n_stations=n_stations, n_days=2, seed=seed, mean_daily=10)
    out, stations, rep = ingest.clean_trips(trips, min_daily_rentals=0.0)
    if not stations:
        return
    series = ingest.aggregate_demand(out, stations)
    assert sum(int(s.arrivals.sum()) for s in series.values()) == rep.n_retained
    assert sum(int(s.departures.sum()) for s in series.values()) == rep.n_retained


def test_aggregate_order_independent():
    trips = synthetic_trips(n_stations=4, n_days=3, seed=2)
    perm = np.random.default_rng(0).permutation(len(trips))
    st_ = [f"S{i:03d}" for i in range(4)]
    a = ingest.aggregate_demand(trips, st_)
    b = ingest.aggregate_demand(trips.select(perm), st_)
    for s in st_:
        assert_array_equal(a[s].arrivals, b[s].arrivals)
        assert_array_equal(a[s].departures, b[s].departures)


def test_demand_series_validates():
    with pytest.raises(ValueError):
        ingest.DemandSeries("s", T("2022-01-01T00"), [1, -1], [0, 0])
    with pytest.raises(ValueError):
        ingest.DemandSeries("s", T("2022-01-01T00"), [], [])


# -- partition_clients ---------------------------------------------------------


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert ingest.fnv1a_64("") == 0xCBF29CE484222325
    assert ingest.fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert ingest.fnv1a_64("foobar") == 0x85944171F73967E8


def test_partition_single_client():
    p = ingest.partition_clients(["a", "b", "c"], 1)
    assert set(p.assignment.values()) == {0}


def test_partition_hash_matches_recomputed():
    stations = [f"station-{i}" for i in range(100)]
    p = ingest.partition_clients(stations, 8)
    for s in stations:
        assert p.assignment[s] == ingest.fnv1a_64(s) % 8
    assert all(p.clients()[c] for c in range(8))
    assert sum(len(v) for v in p.clients().values()) == 100


def test_partition_file_mode(tmp_path):
    path = tmp_path / "part.json"
    path.write_text(json.dumps({"a": 1, "b": 0}))
    p = ingest.partition_clients(["a", "b"], 2, "file", ingest.load_partition_file(path))
    assert dict(p.assignment) == {"a": 1, "b": 0}
    with pytest.raises(ingest.PartitionError):
        ingest.partition_clients(["a", "b", "c"], 2, "file", {"a": 1, "b": 0})
    with pytest.raises(ingest.PartitionError):
        ingest.partition_clients(["a", "b"], 2, "file", {"a": 2, "b": 0})


# -- temporal_split ------------------------------------------------------------


@pytest.mark.parametrize("L, expect", [(1000, (700, 900)), (10, (7, 9))])
def test_split_boundaries(L, expect):
    sp = ingest.temporal_split(L)
    assert (sp.train_end, sp.valid_end) == expect
    assert sp.part("test") == (expect[1], L)


def test_split_rejects_empty_parts():
    with pytest.raises(ValueError):
        ingest.temporal_split(1000, (1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        ingest.temporal_split(9)


@given(st.integers(10, 100_000))
def test_split_fractions_within_one_interval(L):
    sp = ingest.temporal_split(L)
    assert abs(sp.train_end - 0.7 * L) < 1
    assert abs(sp.valid_end - sp.train_end - 0.2 * L) < 2
    assert 0 < sp.train_end < sp.valid_end < L


# -- store ---------------------------------------------------------------------


def test_store_round_trip(tmp_path):
    trips = synthetic_trips(n_stations=4, n_days=3, seed=1)
    out, stations, rep = ingest.clean_trips(trips, min_daily_rentals=0)
    series = ingest.aggregate_demand(out, stations)
    ingest.write_demand_store(tmp_path, series, rep)
    back, manifest = ingest.read_demand_store(tmp_path)
    assert manifest["clean_report"]["n_retained"] == rep.n_retained
    for s in series:
        assert_array_equal(back[s].arrivals, series[s].arrivals)
        assert_array_equal(back[s].departures, series[s].departures)
        assert back[s].t0 == series[s].t0
    first = (tmp_path / "demand.csv").read_text().splitlines()[:2]
    assert first[0] == "station_id,hour_index,timestamp,arrivals,departures"
    assert first[1].startswith(f"{min(stations)},0,")
