"""
Gradient-boosted trees on pooled station data
=============================================

Fit the second-order boosted regressor on a few stations' rows, watch the
validation error, and check that a saved model predicts bit for bit the same.
"""

import numpy as np

from fedbike import evalkit, gbt
from fedbike.featurize import FeatureSpec
from fedbike.ingest import temporal_split
from fedbike.pipeline import build_task, part_matrices
from fedbike.featurize import stack_matrices
from fedbike.synthetic import synthetic_demand

series, _ = synthetic_demand(n_clients=2, stations_per_client=4, n_days=70, seed=1)
split = temporal_split(len(next(iter(series.values()))))
task = build_task(series, FeatureSpec(), split, horizon=1, target="departures")
X, y = stack_matrices(part_matrices(task, "train"))
Xv, yv = stack_matrices(part_matrices(task, "valid"))
Xt, yt = stack_matrices(part_matrices(task, "test"))

params = gbt.BoostParams(n_trees=37, max_depth=6, eta=0.1)
model = gbt.fit_ensemble(X, y, params, task[min(task)]["train"].feature_names, eval_set=(Xv, yv), patience=5)
print(f"kept {len(model)} trees, base score {model.base_score:.3f}")

# Leaf weights are stored unscaled; prediction applies eta once.
T = model.tree_outputs(Xt)
assert np.allclose(model.predict(Xt), model.base_score + model.eta * T.sum(axis=1))

pred = np.maximum(model.predict(Xt), 0)
print("test metrics:", {k: round(v, 3) for k, v in evalkit.all_metrics(yt, pred).items()})

text = gbt.serialize(model)
again = gbt.deserialize(text)
assert np.array_equal(again.predict(Xt), model.predict(Xt))
print(f"model document: {len(text)} bytes, round trip exact")

first = model.trees[0].to_dict()
print("root split of tree 0:", model.feature_names[first["f"]], "<", first["t"])
