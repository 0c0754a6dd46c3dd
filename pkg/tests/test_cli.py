import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from fedbike import cli, gbt
from fedbike.featurize import FeatureSpec
from fedbike.fedlearn import FedConfig, local_fit_ensembles
from fedbike.gbt import BoostParams
from fedbike.ingest import partition_clients, temporal_split
from fedbike.pipeline import build_task, client_datasets, seasonal_naive_predictions, train_cml
from fedbike.synthetic import synthetic_demand, synthetic_trips, trips_to_csv

FIXTURE = """start_station_id,started_at,end_station_id,ended_at
A,2022-03-17T10:05:00,B,2022-03-17T10:25:00
B,2022-03-17T10:30:00,A,2022-03-17T10:50:00
A,2022-03-17T11:00:00,A,2022-03-17T11:01:00
A,2022-03-17T12:00:00,B,2022-03-18T13:00:00
B,2022-03-17T13:00:00,A,2022-03-17T12:00:00
A,2022-03-17T14:00:00,C,2022-03-17T14:20:00
C,2022-03-17T15:00:00,A,2022-03-17T15:10:00
A,2022-03-17T15:30:00,,2022-03-17T15:40:00
C,yesterday,B,2022-03-17T15:40:00
B,2022-03-17T16:00:00,C,2022-03-17T16:45:00
"""

SMALL = {
    "dataset": "toy",
    "trips": "trips.csv",
    "output_dir": "out",
    "partition": {"n_clients": 3},
    "gbt": {"max_depth": 3},
    "cml": {"n_trees": 6, "patience": 3},
    "federation": {"trees_per_client": 4, "e_global": 2, "e_local": 2, "p_train": 0.5},
    "horizons": [1, 2],
    "seed": 3,
}


def write_config(directory: Path, cfg: dict) -> Path:
    path = directory / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- ingest --------------------------------------------------------------------


def test_ingest_fixture_counts(tmp_path):
    (tmp_path / "trips.csv").write_text(FIXTURE)
    cfg = {"trips": "trips.csv", "output_dir": "out", "clean": {"min_daily_rentals": 0}, "partition": {"n_clients": 2}}
    path = write_config(tmp_path, cfg)
    assert cli.main(["ingest", "--config", str(path)]) == 0
    manifest = json.loads((tmp_path / "out/demand/manifest.json").read_text())
    rep = manifest["clean_report"]
    assert manifest["n_malformed"] == 2
    assert rep["n_input"] == 8
    assert (rep["short_roundtrip"], rep["duration"], rep["negative_duration"]) == (1, 1, 1)
    assert rep["n_retained"] == 5
    assert manifest["stations"] == ["A", "B", "C"]
    assert manifest["t0"] == "2022-03-17T10:00:00"
    assert manifest["length"] == 7
    rows = (tmp_path / "out/demand/demand.csv").read_text().splitlines()
    assert "A,0,2022-03-17T10:00:00,1,1" in rows  # B->A arrives 10:50, A->B departs 10:05
    assert "C,6,2022-03-17T16:00:00,1,0" in rows
    part = json.loads((tmp_path / "out/demand/partition.json").read_text())
    assert set(part) == {"A", "B", "C"}

    before = tree_bytes(tmp_path / "out")
    assert cli.main(["ingest", "--config", str(path)]) == 0
    assert tree_bytes(tmp_path / "out") == before


def test_missing_trip_file_is_usage_error(tmp_path, capsys):
    path = write_config(tmp_path, {"trips": "nowhere.csv", "output_dir": "out"})
    assert cli.main(["ingest", "--config", str(path)]) == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_missing_config_and_bad_usage(tmp_path, capsys):
    assert cli.main(["ingest", "--config", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["train", "--variant", "boosted", "--config", "x"]) == 2
    assert cli.main(["frobnicate"]) == 2
    (tmp_path / "bad.json").write_text('{"unknown_key": 1}')
    assert cli.main(["ingest", "--config", str(tmp_path / "bad.json")]) == 2


def test_env_overrides_paths(tmp_path, monkeypatch):
    (tmp_path / "other.csv").write_text(FIXTURE)
    path = write_config(tmp_path, {"trips": "absent.csv", "output_dir": "out", "clean": {"min_daily_rentals": 0}})
    monkeypatch.setenv("FEDBIKE_TRIPS", str(tmp_path / "other.csv"))
    monkeypatch.setenv("FEDBIKE_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert cli.main(["ingest", "--config", str(path)]) == 0
    assert (tmp_path / "elsewhere/demand/manifest.json").is_file()


def test_config_hash_ignores_output_location():
    a = dict(cli.DEFAULT_CONFIG, output_dir="a")
    b = dict(cli.DEFAULT_CONFIG, output_dir="b")
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash(dict(a, seed=1))


def test_lock_blocks_concurrent_runs(tmp_path):
    (tmp_path / "trips.csv").write_text(FIXTURE)
    path = write_config(tmp_path, {"trips": "trips.csv", "output_dir": "out", "clean": {"min_daily_rentals": 0}})
    (tmp_path / "out").mkdir()
    (tmp_path / "out/.lock").touch()
    assert cli.main(["ingest", "--config", str(path)]) == 1


# -- train / evaluate ----------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    trips_to_csv(synthetic_trips(n_stations=8, n_days=42, seed=5), root / "trips.csv")
    path = write_config(root, SMALL)
    assert cli.main(["ingest", "--config", str(path)]) == 0
    assert cli.main(["train", "--variant", "cml", "--config", str(path)]) == 0
    assert cli.main(["train", "--variant", "hfl", "--config", str(path)]) == 0
    return root, path


def test_train_writes_artifacts_with_meta(trained):
    root, path = trained
    cfg = cli.load_config(path)
    for variant in ("cml", "hfl"):
        for h in (1, 2):
            for t in ("arrivals", "departures"):
                doc = json.loads((root / f"out/models/{variant}/h{h}_{t}.json").read_text())
                assert doc["meta"] == {"config_hash": cli.config_hash(cfg), "seed": 3, "code_version": "0.1.0"}
    log = (root / "out/logs/hfl/h1_arrivals.jsonl").read_text().splitlines()
    assert len(log) == 2
    assert set(json.loads(log[0])) == {"round", "selected", "client_losses", "global_param_l2"}


def test_evaluate_and_report(trained, capsys):
    root, path = trained
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    reports = root / "out/reports"
    for name in ("metrics_cml.json", "metrics_hfl.json", "comparison.csv", "representative_series.csv"):
        assert (reports / name).is_file()
    rep = json.loads((reports / "metrics_hfl.json").read_text())
    assert {(r["horizon"], r["target"]) for r in rep["results"]} == {
        (h, t) for h in (1, 2) for t in ("arrivals", "departures")
    }
    assert all(r["mae"] <= r["rmse"] for r in rep["results"])
    picks = json.loads((reports / "representative_stations.json").read_text())
    assert [p["percentile"] for p in picks["stations"]] == [25, 50, 75]
    first = (reports / "representative_series.csv").read_bytes()
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    assert (reports / "representative_series.csv").read_bytes() == first
    capsys.readouterr()
    assert cli.main(["report", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "MAE (bikes)" in out and "gap_percent" in out


def test_evaluate_single_variant(trained, tmp_path, caplog):
    root, _ = trained
    work = tmp_path / "one"
    shutil.copytree(root, work)
    shutil.rmtree(work / "out/models/hfl")
    (work / "out/reports").exists() and shutil.rmtree(work / "out/reports")
    assert cli.main(["evaluate", "--config", str(work / "run.json")]) == 0
    assert (work / "out/reports/metrics_cml.json").is_file()
    assert not (work / "out/reports/comparison.csv").exists()
    assert "comparison omitted" in caplog.text


def test_evaluate_lists_missing_tasks(trained, tmp_path, capsys):
    root, _ = trained
    work = tmp_path / "partial"
    shutil.copytree(root, work)
    (work / "out/models/cml/h2_departures.json").unlink()
    assert cli.main(["evaluate", "--config", str(work / "run.json")]) == 1
    assert "h2_departures" in capsys.readouterr().err
    shutil.rmtree(work / "out/models")
    assert cli.main(["evaluate", "--config", str(work / "run.json")]) == 1


def test_evaluate_refuses_foreign_artifacts(trained, tmp_path, capsys):
    root, _ = trained
    work = tmp_path / "foreign"
    shutil.copytree(root, work)
    p = work / "out/models/cml/h1_arrivals.json"
    doc = json.loads(p.read_text())
    doc["meta"]["seed"] = 99
    p.write_text(json.dumps(doc))
    assert cli.main(["evaluate", "--config", str(work / "run.json")]) == 2
    assert "produced with" in capsys.readouterr().err


def test_train_refuses_store_from_other_config(trained, tmp_path):
    root, _ = trained
    work = tmp_path / "reseeded"
    shutil.copytree(root, work)
    cfg = dict(SMALL, seed=4)
    path = write_config(work, cfg)
    assert cli.main(["train", "--variant", "cml", "--config", str(path)]) == 2


def test_train_is_reproducible(trained, tmp_path):
    root, path = trained
    work = tmp_path / "again"
    work.mkdir()
    shutil.copy(root / "trips.csv", work / "trips.csv")
    p2 = write_config(work, SMALL)
    for args in (["ingest"], ["train", "--variant", "cml"], ["train", "--variant", "hfl"]):
        assert cli.main(args + ["--config", str(p2)]) == 0
    a = tree_bytes(root / "out/models")
    b = tree_bytes(work / "out/models")
    assert a == b
    assert tree_bytes(root / "out/logs") == tree_bytes(work / "out/logs")


# -- pipeline glue -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_task():
    series, part = synthetic_demand(n_clients=2, stations_per_client=3, n_days=42, seed=1)
    split = temporal_split(len(next(iter(series.values()))))
    return series, part, build_task(series, FeatureSpec(), split, 1, "arrivals")


def test_cml_equals_single_client_stage_one(small_task):
    series, _, task = small_task
    one = partition_clients(series, 1)
    params = BoostParams(max_depth=3, n_trees=37)
    cml = train_cml(task, params, patience=5)
    (local,) = local_fit_ensembles(client_datasets(task, one), params, 37, patience=5)
    assert len(local) == 37 and len(cml) <= 37
    assert gbt.serialize(local) == gbt.serialize(cml.padded(37))


def test_seasonal_naive_predictions(small_task):
    series, _, task = small_task
    y, p = seasonal_naive_predictions(series, task)
    s = sorted(task)[0]
    m = task[s]["test"]
    np.testing.assert_array_equal(p[: len(m)], series[s].arrivals[m.origin_index + 1 - 24])
    np.testing.assert_array_equal(y[: len(m)], m.targets)


def test_client_datasets_skip_empty(small_task):
    series, _, task = small_task
    from fedbike.ingest import ClientPartition

    part = ClientPartition(3, {s: 0 if i % 2 else 2 for i, s in enumerate(sorted(series))})
    clients = client_datasets(task, part)
    assert [c.client_id for c in clients] == [0, 2]
    assert sum(len(c.y_train) for c in clients) == sum(len(task[s]["train"]) for s in task)


def test_fed_config_from_run_config():
    cfg = dict(cli.DEFAULT_CONFIG, federation={"e_global": 3}, seed=9)
    assert cli.fed_config(cfg) == FedConfig(e_global=3, seed=9)
