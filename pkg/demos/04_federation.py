"""
A federated run next to its centralized twin
============================================

Clients boost local ensembles, the server stitches them into one forest, and a
small convolutional head learns how much to trust each tree.  Only model
documents cross the wire; the transcript audit confirms it.
"""

import numpy as np

from fedbike import evalkit, fedlearn
from fedbike.featurize import FeatureSpec
from fedbike.gbt import BoostParams
from fedbike.ingest import temporal_split
from fedbike.pipeline import build_task, part_matrices, seasonal_naive_predictions, train_cml, train_hfl
from fedbike.synthetic import synthetic_demand

series, partition = synthetic_demand(n_clients=4, stations_per_client=5, n_days=70, seed=2)
split = temporal_split(len(next(iter(series.values()))))
task = build_task(series, FeatureSpec(), split, horizon=1, target="arrivals")
test = {(1, "arrivals"): part_matrices(task, "test")}

params = BoostParams(n_trees=37)
cml = train_cml(task, params)
cfg = fedlearn.FedConfig(n_clients=4, p_train=0.5, e_global=8, seed=0)
run = train_hfl(task, partition, cfg, params)

for line in run.log_lines()[:3]:
    print(line)

# At initialization the head averages the clients' own forecasts.
X = part_matrices(task, "test")[0].rows
local_mean = np.mean([e.predict(X) for e in run.forest.ensembles], axis=0)
assert np.allclose(fedlearn.predict_global(run.forest, run.initial_layer, X, clamp=False), local_mean)

rep_cml = evalkit.evaluate({(1, "arrivals"): cml}, test, "CML")
rep_hfl = evalkit.evaluate({(1, "arrivals"): run.predict}, test, "HFL-global")
y, naive = seasonal_naive_predictions(series, task)
print(f"MAE  CML {rep_cml.get(1, 'arrivals', 'mae'):.3f}  HFL {rep_hfl.get(1, 'arrivals', 'mae'):.3f}"
      f"  24h persistence {evalkit.mae(y, naive):.3f}")

problems = fedlearn.audit_transcript(run.transcript, run.layer.n_params)
kinds = sorted({m.kind for m in run.transcript})
print(f"{len(run.transcript)} messages of kinds {kinds}; audit problems: {problems or 'none'}")
