"""
Features for one forecasting task
=================================

Each (horizon, target) pair is its own regression problem.  A row is built at
an origin hour ``t`` from data at hours ``<= t`` plus calendar terms, and its
target is demand at ``t + horizon``.
"""

import numpy as np

from fedbike import featurize as fz
from fedbike.ingest import temporal_split
from fedbike.synthetic import synthetic_demand

series, _ = synthetic_demand(n_clients=1, stations_per_client=1, n_days=56, seed=3)
station = next(iter(series.values()))

# Radial basis encodings wrap around: 23:00 sits next to midnight.
print("hour 23 vs centers 0..3:", np.round(fz.rbf_encode(23, 24, 12, 2.0)[:4], 4))

# The seasonal signal is a least-squares fit over the first four weeks.
y = station.arrivals.astype(float)
coeffs = fz.fourier_fit(y[:672], period=24, harmonics=3)
print("daily mean", round(coeffs.mean, 3), "cosine terms", np.round(coeffs.a, 3))

spec = fz.FeatureSpec()
names = spec.feature_names()
print(f"{len(names)} features; first origin hour {spec.first_origin}")

split = temporal_split(len(station))
parts = fz.assemble_matrix(station, "arrivals", horizon=3, spec=spec, split=split)
for name, m in parts.items():
    print(f"{name:5s}: {len(m):5d} rows, origins {m.origin_index.min()}..{m.origin_index.max()}")

row = dict(zip(names, parts["valid"].rows[0]))
for key in ("lag_arrivals_1", "lag_arrivals_24", "roll_mean_24", "ewm_12", "fourier_24", "is_workhour"):
    print(f"  {key:16s} {row[key]:.3f}")
