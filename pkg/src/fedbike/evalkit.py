"""Forecast metrics, multi-horizon reports and CML/HFL comparison.

SMAPE is reported as a fraction in ``[0, 2]`` and MAAPE in radians.  All
metrics are micro-averages over pooled (station, origin-hour) points.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .featurize import HORIZONS, TARGET_KINDS, FeatureMatrix

METRICS = ("smape", "maape", "mae", "rmse")
METRIC_LABELS = {
    "smape": "SMAPE (fraction)",
    "maape": "MAAPE (rads)",
    "mae": "MAE (bikes)",
    "rmse": "RMSE (bikes)",
}
SUPPORTED_PERCENTILES = (25, 50, 75)


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {len(y)} actual vs {len(y_hat)} predicted")
    if len(y) == 0:
        raise ValueError("metrics need at least one point")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def smape(y, y_hat) -> float:
    """Mean of ``2|y - y_hat| / (|y| + |y_hat|)``, a term being 0 when both are 0."""
    y, y_hat = _pair(y, y_hat)
    num = 2.0 * np.abs(y - y_hat)
    den = np.abs(y) + np.abs(y_hat)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(np.mean(terms))


def maape(y, y_hat) -> float:
    """Mean of ``arctan(|y - y_hat| / |y|)``; zero actuals give pi/2 (or 0 if exact)."""
    y, y_hat = _pair(y, y_hat)
    err = np.abs(y - y_hat)
    ay = np.abs(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.arctan(err / ay)
    terms = np.where(ay == 0, np.where(err == 0, 0.0, math.pi / 2), terms)
    return float(np.mean(terms))


def all_metrics(y, y_hat) -> dict[str, float]:
    return {"smape": smape(y, y_hat), "maape": maape(y, y_hat), "mae": mae(y, y_hat), "rmse": rmse(y, y_hat)}


@dataclass
class MetricsReport:
    dataset: str
    variant: str
    cells: dict[tuple[int, str], dict[str, float]] = field(default_factory=dict)
    n_points: dict[tuple[int, str], int] = field(default_factory=dict)

    @property
    def horizons(self) -> list[int]:
        return sorted({h for h, _ in self.cells})

    def get(self, horizon: int, target: str, metric: str) -> float:
        return self.cells[(horizon, target)][metric]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "variant": self.variant,
            "units": {"smape": "fraction", "maape": "radians", "mae": "bikes", "rmse": "bikes"},
            "results": [
                {"horizon": h, "target": t, "n_points": self.n_points[(h, t)], **self.cells[(h, t)]}
                for (h, t) in sorted(self.cells)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        rep = cls(d["dataset"], d["variant"])
        for row in d["results"]:
            key = (int(row["horizon"]), row["target"])
            rep.cells[key] = {m: float(row[m]) for m in METRICS}
            rep.n_points[key] = int(row["n_points"])
        return rep

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, delimiter: str = ",") -> str:
        """Metric rows x horizon columns, cells formatted ``arrivals / departures``."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        hs = self.horizons
        w.writerow(["dataset", "variant", "metric"] + [f"horizon {h}" for h in hs])
        for m in METRICS:
            row = [self.dataset, self.variant, METRIC_LABELS[m]]
            for h in hs:
                vals = [
                    f"{self.cells[(h, t)][m]:.3f}" if (h, t) in self.cells else "-" for t in TARGET_KINDS
                ]
                row.append(" / ".join(vals))
            w.writerow(row)
        return buf.getvalue()


Predictor = Callable[[np.ndarray], np.ndarray]


def _as_predictor(model) -> Predictor:
    return model.predict if hasattr(model, "predict") else model


def evaluate(
    models: Mapping[tuple[int, str], object],
    test: Mapping[tuple[int, str], Sequence[FeatureMatrix]],
    variant: str,
    dataset: str = "dataset",
) -> MetricsReport:
    """Micro-averaged metrics per task over all stations' test rows.

    ``models`` maps ``(horizon, target)`` to anything with ``predict(X)`` (or a
    plain callable); ``test`` maps the same keys to per-station test matrices.
    Predictions are clamped at zero.
    """
    missing = sorted(set(test) - set(models))
    if missing:
        raise KeyError(f"no model for tasks {missing}")
    report = MetricsReport(dataset, variant)
    for key in sorted(test):
        mats = [m for m in test[key] if len(m)]
        if not mats:
            raise ValueError(f"task {key} has no test rows")
        predict = _as_predictor(models[key])
        y = np.concatenate([m.targets for m in mats])
        y_hat = np.maximum(np.concatenate([np.asarray(predict(m.rows), float) for m in mats]), 0.0)
        report.cells[key] = all_metrics(y, y_hat)
        report.n_points[key] = len(y)
    return report


def per_station_rmse(model, mats: Sequence[FeatureMatrix]) -> dict[str, float]:
    predict = _as_predictor(model)
    return {m.station: rmse(m.targets, np.maximum(predict(m.rows), 0.0)) for m in mats if len(m)}


def representative_stations(
    station_rmse: Mapping[str, float], percentiles: Sequence[int] = SUPPORTED_PERCENTILES
) -> list[tuple[int, str]]:
    """Nearest-rank percentile stations of an RMSE map (ties by station id)."""
    bad = [p for p in percentiles if p not in SUPPORTED_PERCENTILES]
    if bad:
        raise ValueError(f"unsupported percentiles {bad}; choose from {SUPPORTED_PERCENTILES}")
    if len(station_rmse) < 4:
        raise ValueError("need at least 4 stations to pick percentile representatives")
    ranked = sorted(station_rmse, key=lambda s: (station_rmse[s], s))
    n = len(ranked)
    return [(p, ranked[max(1, math.ceil(p / 100 * n)) - 1]) for p in percentiles]


def station_day_series(
    mats: Mapping[str, FeatureMatrix],
    stations: Sequence[str],
    t0: np.datetime64,
    day,
    predictors: Mapping[str, object],
) -> str:
    """Delimited plot data: one row per (station, origin hour) of ``day``.

    Columns are station, target timestamp, actual, then one column per named
    predictor (e.g. ``cml``, ``hfl``).
    """
    day = np.datetime64(day, "D")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(predictors)
    w.writerow(["station", "horizon", "timestamp", "actual"] + names)
    for s in stations:
        m = mats[s]
        stamps = np.datetime64(t0, "h") + (m.origin_index + m.horizon).astype("timedelta64[h]")
        on_day = stamps.astype("datetime64[D]") == day
        if not on_day.any():
            continue
        preds = {n: np.maximum(_as_predictor(p)(m.rows[on_day]), 0.0) for n, p in predictors.items()}
        for i, ts in enumerate(np.datetime_as_string(stamps[on_day], unit="h")):
            w.writerow(
                [s, m.horizon, ts, f"{m.targets[on_day][i]:g}"] + [f"{preds[n][i]:.6g}" for n in names]
            )
    return buf.getvalue()


def compare(report_cml: MetricsReport, report_hfl: MetricsReport, metrics=("mae", "rmse")) -> dict:
    """Relative gap ``(hfl - cml) / cml`` per task and metric (``None`` when cml is 0)."""
    if set(report_cml.cells) != set(report_hfl.cells):
        raise ValueError("reports cover different tasks")
    out = {}
    for key in sorted(report_cml.cells):
        row = {}
        for m in metrics:
            c, f = report_cml.cells[key][m], report_hfl.cells[key][m]
            row[m] = None if c == 0 else (f - c) / c
        out[key] = row
    return out


def comparison_table(gaps: Mapping[tuple[int, str], Mapping[str, float | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["horizon", "target", "metric", "gap_percent"])
    for (h, t), row in sorted(gaps.items()):
        for m, v in row.items():
            w.writerow([h, t, m, "n/a" if v is None else f"{100 * v:+.2f}"])
    return buf.getvalue()


def seasonal_naive(series, origins, horizon: int, season: int = 24) -> np.ndarray:
    """Persistence baseline: the value one season before the target hour."""
    if horizon > season:
        raise ValueError("horizon beyond one season would need future data")
    origins = np.asarray(origins)
    return np.asarray(series, dtype=float)[origins + horizon - season]


__all__ = [
    "HORIZONS",
    "METRICS",
    "MetricsReport",
    "all_metrics",
    "compare",
    "comparison_table",
    "evaluate",
    "mae",
    "maape",
    "per_station_rmse",
    "representative_stations",
    "rmse",
    "seasonal_naive",
    "smape",
    "station_day_series",
]
