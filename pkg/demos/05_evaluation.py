"""
Reading the scores
==================

The four error measures, the table layout used in reports, and the stations
picked to illustrate typical, good and bad forecasts.
"""

import math

import numpy as np

from fedbike import evalkit

y = np.array([0, 0, 4, 7, 2])
y_hat = np.array([0, 1, 3, 7, 5])
for name, fn in (("smape", evalkit.smape), ("maape", evalkit.maape), ("mae", evalkit.mae), ("rmse", evalkit.rmse)):
    print(f"{name:5s} {fn(y, y_hat):.4f}")

# A zero actual with a non-zero forecast costs the full quarter turn in MAAPE.
print("maape([0],[1]) =", evalkit.maape([0], [1]), "= pi/2:", evalkit.maape([0], [1]) == math.pi / 2)

rng = np.random.default_rng(0)
report = evalkit.MetricsReport("synthetic", "CML")
for h in (1, 2, 3):
    for target in ("arrivals", "departures"):
        truth = rng.poisson(3, 500)
        guess = np.maximum(truth + rng.normal(0, 0.5 + 0.2 * h, 500), 0)
        report.cells[(h, target)] = evalkit.all_metrics(truth, guess)
        report.n_points[(h, target)] = 500
print(report.to_table())

station_rmse = {f"S{i:02d}": float(v) for i, v in enumerate(rng.gamma(2.0, 0.6, 12))}
for pct, station in evalkit.representative_stations(station_rmse):
    print(f"{pct}th percentile station {station}: RMSE {station_rmse[station]:.3f}")

other = evalkit.MetricsReport.from_dict(report.to_dict())
other.variant = "HFL-global"
for cell in other.cells.values():
    cell["mae"] *= 1.1
print(evalkit.comparison_table(evalkit.compare(report, other)))
