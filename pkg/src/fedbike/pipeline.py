"""Task-level glue: feature matrices per station, CML and HFL training."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from . import gbt
from .featurize import FeatureMatrix, FeatureSpec, assemble_matrix, stack_matrices
from .fedlearn import ClientData, FedConfig, FederationRun, run_federation
from .gbt import BoostParams, Ensemble
from .ingest import ClientPartition, DemandSeries, TemporalSplit

logger = logging.getLogger(__name__)

StationMatrices = dict[str, dict[str, FeatureMatrix]]


def build_task(
    series: Mapping[str, DemandSeries],
    spec: FeatureSpec,
    split: TemporalSplit,
    horizon: int,
    target: str,
) -> StationMatrices:
    """station -> {"train"|"valid"|"test": FeatureMatrix} for one task."""
    return {s: assemble_matrix(series[s], target, horizon, spec, split) for s in sorted(series)}


def part_matrices(task: StationMatrices, part: str, stations: Sequence[str] | None = None) -> list[FeatureMatrix]:
    stations = sorted(task) if stations is None else stations
    return [task[s][part] for s in stations]


def client_datasets(task: StationMatrices, partition: ClientPartition) -> list[ClientData]:
    """Row-concatenated train/valid matrices per non-empty client."""
    out = []
    for cid, stations in partition.clients().items():
        stations = [s for s in stations if s in task]
        if not stations:
            logger.warning("client %d holds no stations and is left out", cid)
            continue
        X, y = stack_matrices(part_matrices(task, "train", stations))
        Xv, yv = stack_matrices(part_matrices(task, "valid", stations))
        out.append(ClientData(cid, X, y, Xv, yv, list(task[stations[0]]["train"].feature_names)))
    return out


def train_cml(
    task: StationMatrices,
    params: BoostParams,
    patience: int = 5,
    n_jobs: int = 1,
) -> Ensemble:
    """One ensemble on all stations' pooled rows, early-stopped on pooled validation."""
    X, y = stack_matrices(part_matrices(task, "train"))
    Xv, yv = stack_matrices(part_matrices(task, "valid"))
    names = part_matrices(task, "train")[0].feature_names
    return gbt.fit_ensemble(X, y, params, names, eval_set=(Xv, yv), patience=patience, n_jobs=n_jobs)


def train_hfl(
    task: StationMatrices,
    partition: ClientPartition,
    cfg: FedConfig,
    params: BoostParams,
    n_jobs: int = 1,
) -> FederationRun:
    return run_federation(client_datasets(task, partition), cfg, params, n_jobs=n_jobs)


def seasonal_naive_predictions(
    series: Mapping[str, DemandSeries], task: StationMatrices, part: str = "test", season: int = 24
) -> tuple[np.ndarray, np.ndarray]:
    """(actual, persistence forecast) pooled over stations."""
    ys, ps = [], []
    for s in sorted(task):
        m = task[s][part]
        y = series[s].target(m.target_kind).astype(float)
        ys.append(m.targets)
        ps.append(y[m.origin_index + m.horizon - season])
    return np.concatenate(ys), np.concatenate(ps)


def boost_params_from_dict(d: Mapping) -> BoostParams:
    d = dict(d)
    if "lambda" in d:
        d["reg_lambda"] = d.pop("lambda")
    return BoostParams(**d)
