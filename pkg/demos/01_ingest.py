"""
From trip logs to hourly station demand
=======================================

Generate a small synthetic trip file, read it back, clean it, and turn it into
per-station hourly arrival/departure counts on one shared grid.  Then assign
stations to simulated clients and split the time axis 70/20/10.
"""

import tempfile
from pathlib import Path

import numpy as np

from fedbike import ingest
from fedbike.synthetic import synthetic_trips, trips_to_csv

workdir = Path(tempfile.mkdtemp())
trips_to_csv(synthetic_trips(n_stations=12, n_days=42, seed=0), workdir / "trips.csv")

# Parsing is forgiving: malformed rows are counted, not fatal.
trips = ingest.parse_trips(workdir / "trips.csv")
print(f"parsed {len(trips)} trips, {trips.n_malformed} malformed rows")

# Cleaning drops implausible durations, dock-return round trips and quiet stations.
# The synthetic log is well behaved, so every trip survives here.
clean, stations, report = ingest.clean_trips(trips)
print("clean report:", report.to_dict())

# Every station shares one hourly grid; empty hours are explicit zeros.
series = ingest.aggregate_demand(clean, stations)
first = series[min(series)]
print(f"grid starts {first.t0}, {len(first)} hours, {len(series)} stations")
print("arrivals over the first day at", first.station, first.arrivals[:24])

# Conservation: each retained trip arrives once and departs once.
total_arr = sum(int(s.arrivals.sum()) for s in series.values())
total_dep = sum(int(s.departures.sum()) for s in series.values())
assert total_arr == total_dep == report.n_retained

# Stable hashing spreads stations across clients identically on any machine.
partition = ingest.partition_clients(stations, n_clients=4)
for client, members in partition.clients().items():
    print(f"client {client}: {members}")

split = ingest.temporal_split(len(first))
print("train/valid/test hours:", split.part("train"), split.part("valid"), split.part("test"))
start_valid, start_test = split.timestamps(first.t0)
print("validation starts", start_valid, "test starts", start_test)

ingest.write_demand_store(workdir / "demand", series, report)
print("demand store written to", workdir / "demand")
print("weekday mean departures per hour:", np.round(np.mean([s.departures.mean() for s in series.values()]), 3))
