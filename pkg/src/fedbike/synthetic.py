"""Synthetic bike-demand generators for tests, demos and the desk-scale benchmark."""

from __future__ import annotations

import numpy as np

from .ingest import ClientPartition, DemandSeries, TripTable

DEFAULT_T0 = np.datetime64("2022-01-03T00", "h")  # a Monday


def _daily_profile(hours: np.ndarray, commuter: float) -> np.ndarray:
    """Bimodal commuter peaks blended with a midday leisure bump."""
    h = np.mod(hours, 24).astype(float)
    am = np.exp(-0.5 * ((h - 8.0) / 1.3) ** 2)
    pm = np.exp(-0.5 * ((h - 17.5) / 1.6) ** 2)
    midday = np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
    return 0.15 + commuter * (am + pm) + (1.0 - commuter) * 1.2 * midday


def demand_rates(n_hours: int, scale: float, commuter: float, phase: float, t0=DEFAULT_T0) -> np.ndarray:
    """Expected hourly counts with daily and weekly structure."""
    hours = (np.datetime64(t0, "h") + np.arange(n_hours)).astype(np.int64)
    dow = np.mod(np.floor_divide(hours, 24) + 3, 7)
    weekend = dow >= 5
    weekday_profile = _daily_profile(hours + phase, commuter)
    weekend_profile = _daily_profile(hours + phase, 0.1) * 0.8
    base = np.where(weekend, weekend_profile, weekday_profile)
    return scale * base


def synthetic_demand(
    n_clients: int = 8,
    stations_per_client: int = 20,
    n_days: int = 120,
    seed: int = 0,
    t0=DEFAULT_T0,
) -> tuple[dict[str, DemandSeries], ClientPartition]:
    """Poisson demand for ``n_clients * stations_per_client`` stations.

    Each client draws its stations' volume and commuter share from its own
    distribution, so clients are mildly non-IID.
    """
    rng = np.random.default_rng(seed)
    n_hours = 24 * n_days
    series, assignment = {}, {}
    for c in range(n_clients):
        client_scale = rng.uniform(0.6, 1.6)
        client_commuter = rng.uniform(0.3, 0.9)
        for k in range(stations_per_client):
            sid = f"c{c:02d}s{k:03d}"
            scale = client_scale * rng.lognormal(0.8, 0.5)
            commuter = float(np.clip(client_commuter + rng.normal(0, 0.1), 0.05, 0.95))
            # departures lead arrivals at residential stations and lag at work ones
            lam_dep = demand_rates(n_hours, scale, commuter, rng.normal(0, 0.5), t0)
            lam_arr = demand_rates(n_hours, scale, commuter, rng.normal(0, 0.5), t0)
            series[sid] = DemandSeries(sid, t0, rng.poisson(lam_arr), rng.poisson(lam_dep))
            assignment[sid] = c
    return series, ClientPartition(n_clients, assignment)


def synthetic_trips(
    n_stations: int = 12,
    n_days: int = 42,
    seed: int = 0,
    t0=DEFAULT_T0,
    mean_daily: float = 40.0,
) -> TripTable:
    """Trip records whose departures follow :func:`demand_rates`.

    Destinations are uniform over the other stations; durations are lognormal
    around 12 minutes.  Timestamps are at second resolution.
    """
    rng = np.random.default_rng(seed)
    n_hours = 24 * n_days
    stations = [f"S{i:03d}" for i in range(n_stations)]
    starts, ends, t_start, t_end = [], [], [], []
    t0s = np.datetime64(t0, "s")
    for i, sid in enumerate(stations):
        scale = mean_daily / 24.0 * rng.uniform(0.5, 1.5) / 0.6
        lam = demand_rates(n_hours, scale, rng.uniform(0.3, 0.9), 0.0, t0)
        counts = rng.poisson(lam)
        hours = np.repeat(np.arange(n_hours), counts)
        offs = hours * 3600 + rng.integers(0, 3600, size=len(hours))
        dest = rng.integers(0, n_stations - 1, size=len(hours))
        dest = np.where(dest >= i, dest + 1, dest)
        dur = np.maximum(60, rng.lognormal(np.log(720), 0.5, size=len(hours))).astype(np.int64)
        ts = t0s + offs.astype("timedelta64[s]")
        starts += [sid] * len(hours)
        ends += [stations[d] for d in dest]
        t_start.append(ts)
        t_end.append(ts + dur.astype("timedelta64[s]"))
    order_key = np.concatenate(t_start) if t_start else np.array([], "datetime64[s]")
    order = np.argsort(order_key, kind="stable")
    return TripTable(
        np.array(starts, dtype=object)[order],
        np.array(ends, dtype=object)[order],
        order_key[order],
        np.concatenate(t_end)[order],
    )


def trips_to_csv(trips: TripTable, path, time_format: str = "%Y-%m-%dT%H:%M:%S") -> None:
    """Write trips with the default column names."""
    import csv
    from datetime import datetime

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start_station_id", "started_at", "end_station_id", "ended_at"])
        for t in trips:
            a = datetime.fromisoformat(str(t.t_start)).strftime(time_format)
            b = datetime.fromisoformat(str(t.t_end)).strftime(time_format)
            w.writerow([t.start_station, a, t.end_station, b])
