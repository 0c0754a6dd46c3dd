"""Command-line driver: ``fedbike {ingest,train,evaluate,report} --config run.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Paths in the config may be overridden with ``FEDBIKE_TRIPS``,
``FEDBIKE_OUTPUT_DIR``, ``FEDBIKE_PARTITION``, ``FEDBIKE_HOLIDAYS`` and
``FEDBIKE_SCHOOL``; ``FEDBIKE_THREADS`` sets split-search threads and never
affects results.
"""

from __future__ import annotations

import argparse
import copy
import functools
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, evalkit, gbt, ingest
from .featurize import HORIZONS, TARGET_KINDS, CalendarSpec, FeatureSpec, load_date_file
from .fedlearn import FedConfig, global_model_document, load_global_model, predict_global
from .pipeline import boost_params_from_dict, build_task, part_matrices, train_cml, train_hfl

logger = logging.getLogger("fedbike")

ENV_PATHS = {
    "FEDBIKE_TRIPS": ("trips",),
    "FEDBIKE_OUTPUT_DIR": ("output_dir",),
    "FEDBIKE_PARTITION": ("partition", "file"),
    "FEDBIKE_HOLIDAYS": ("features", "holiday_file"),
    "FEDBIKE_SCHOOL": ("features", "school_file"),
}

DEFAULT_CONFIG = {
    "dataset": "dataset",
    "trips": None,
    "schema": dict(ingest.DEFAULT_SCHEMA),
    "time_format": ingest.DEFAULT_TIME_FORMAT,
    "delimiter": ",",
    "clean": {"min_roundtrip_s": 120, "max_duration_h": 24, "min_daily_rentals": 3.0},
    "partition": {"n_clients": ingest.DEFAULT_N_CLIENTS, "mode": "hash", "file": None},
    "features": {"holiday_file": None, "school_file": None},
    "gbt": {},
    "cml": {"n_trees": 37, "patience": 5},
    "federation": {},
    "split": [0.7, 0.2, 0.1],
    "horizons": list(HORIZONS),
    "targets": list(TARGET_KINDS),
    "output_dir": "out",
    "seed": 0,
    "report": {"day": None},
}


class ConfigError(Exception):
    pass


class RunError(Exception):
    pass


# -- config ------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    for env, keys in ENV_PATHS.items():
        if os.environ.get(env):
            node = cfg
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = os.environ[env]
    base = path.parent
    for keys in ENV_PATHS.values():
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        v = node.get(keys[-1])
        if v and not Path(v).is_absolute():
            node[keys[-1]] = str(base / v)
    return cfg


def _file_digest(path) -> str | None:
    if not path or not Path(path).is_file():
        return None
    st = Path(path).stat()
    return _digest(str(Path(path).resolve()), st.st_mtime_ns, st.st_size)


@functools.lru_cache(maxsize=32)
def _digest(path: str, mtime_ns: int, size: int) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    """Hash of everything that can change results.

    Input files enter by content, so moving a run directory or overriding a
    path with an identical file keeps the hash; the output location is ignored.
    """
    keyed = copy.deepcopy(cfg)
    keyed.pop("output_dir", None)
    for env, keys in ENV_PATHS.items():
        if keys == ("output_dir",):
            continue
        node = keyed
        for k in keys[:-1]:
            node = node.get(k, {})
        if keys[-1] in node:
            node[keys[-1]] = _file_digest(node[keys[-1]])
    canon = json.dumps(keyed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def feature_spec(cfg: dict) -> FeatureSpec:
    f = dict(cfg["features"])
    hol, school = f.pop("holiday_file", None), f.pop("school_file", None)
    calendar = CalendarSpec(
        holidays=load_date_file(hol) if hol else frozenset(),
        workhours=tuple(f.pop("workhours", (9, 17))),
        school_days=load_date_file(school) if school else None,
    )
    try:
        return FeatureSpec(**f, calendar=calendar)
    except TypeError as exc:
        raise ConfigError(f"bad features block: {exc}") from None


def fed_config(cfg: dict) -> FedConfig:
    try:
        return FedConfig(**{**cfg["federation"], "seed": int(cfg["seed"])})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad federation block: {exc}") from None


def boost_params(cfg: dict, n_trees: int) -> gbt.BoostParams:
    try:
        return boost_params_from_dict({**cfg["gbt"], "n_trees": n_trees})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad gbt block: {exc}") from None


def _validate(cfg: dict) -> None:
    for h in cfg["horizons"]:
        if h not in HORIZONS:
            raise ConfigError(f"horizon {h} outside {HORIZONS}")
    for t in cfg["targets"]:
        if t not in TARGET_KINDS:
            raise ConfigError(f"unknown target {t!r}")
    for keys in ENV_PATHS.values():
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        v = node.get(keys[-1])
        if v and keys != ("output_dir",) and not Path(v).exists():
            raise ConfigError(f"file not found: {v}")


# -- io helpers --------------------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@contextmanager
def _lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"{lock} exists: another run is using this output directory") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _meta(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": int(cfg["seed"]), "code_version": __version__}


def _check_meta(doc: dict, cfg: dict, what: str) -> None:
    got = doc.get("meta", {})
    want = _meta(cfg)
    if got != want:
        raise ConfigError(f"{what} was produced with {got}, current run is {want}")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDBIKE_THREADS", "1")))
    except ValueError:
        return 1


def _task_name(h: int, target: str) -> str:
    return f"h{h}_{target}"


# -- subcommands -------------------------------------------------------------------


def cmd_ingest(cfg: dict) -> dict:
    trips_path = cfg["trips"]
    if not trips_path:
        raise ConfigError("config has no 'trips' path")
    if not Path(trips_path).is_file():
        raise ConfigError(f"trip file not found: {trips_path}")
    out = Path(cfg["output_dir"])
    try:
        trips = ingest.parse_trips(trips_path, cfg["schema"], cfg["time_format"], cfg["delimiter"])
    except ingest.SchemaError as exc:
        raise ConfigError(f"{trips_path}: {exc}") from None
    c = cfg["clean"]
    cleaned, stations, report = ingest.clean_trips(
        trips,
        min_roundtrip=np.timedelta64(int(c["min_roundtrip_s"]), "s"),
        max_duration=np.timedelta64(int(round(float(c["max_duration_h"]) * 3600)), "s"),
        min_daily_rentals=float(c["min_daily_rentals"]),
    )
    if not stations:
        raise RunError("no station survives cleaning")
    series = ingest.aggregate_demand(cleaned, stations)
    ingest.write_demand_store(out / "demand", series, report)
    manifest = json.loads((out / "demand" / "manifest.json").read_text())
    manifest["n_malformed"] = trips.n_malformed
    manifest["meta"] = _meta(cfg)
    _write_atomic(out / "demand" / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    p = cfg["partition"]
    mapping = ingest.load_partition_file(p["file"]) if p.get("mode") == "file" else None
    try:
        part = ingest.partition_clients(stations, int(p["n_clients"]), p.get("mode", "hash"), mapping)
    except ingest.PartitionError as exc:
        raise ConfigError(str(exc)) from None
    _write_atomic(out / "demand" / "partition.json", json.dumps(dict(sorted(part.assignment.items())), indent=2) + "\n")
    logger.info("ingested %d trips -> %d retained over %d stations", len(trips), report.n_retained, len(stations))
    return manifest


def _load_store(cfg: dict):
    out = Path(cfg["output_dir"])
    if not (out / "demand" / "manifest.json").is_file():
        raise RunError(f"no demand store under {out / 'demand'}; run 'ingest' first")
    series, manifest = ingest.read_demand_store(out / "demand")
    _check_meta(manifest, cfg, "demand store")
    mapping = ingest.load_partition_file(out / "demand" / "partition.json")
    part = ingest.partition_clients(series, int(cfg["partition"]["n_clients"]), "file", mapping)
    split = ingest.temporal_split(manifest["length"], tuple(cfg["split"]))
    return series, manifest, part, split


def cmd_train(cfg: dict, variant: str) -> list[str]:
    if variant not in ("cml", "hfl"):
        raise ConfigError(f"unknown variant {variant!r} (choose cml or hfl)")
    series, _, part, split = _load_store(cfg)
    spec = feature_spec(cfg)
    out = Path(cfg["output_dir"])
    meta = _meta(cfg)
    written = []
    for h in cfg["horizons"]:
        for target in cfg["targets"]:
            task = build_task(series, spec, split, h, target)
            name = _task_name(h, target)
            if variant == "cml":
                params = boost_params(cfg, int(cfg["cml"]["n_trees"]))
                ens = train_cml(task, params, int(cfg["cml"]["patience"]), n_jobs=_threads())
                doc = {"meta": meta, "kind": "cml", "task": [h, target], "model": gbt.to_document(ens)}
            else:
                fcfg = fed_config(cfg)
                params = boost_params(cfg, fcfg.trees_per_client)
                run = train_hfl(task, part, fcfg, params, n_jobs=_threads())
                doc = {"meta": meta, "kind": "hfl", "task": [h, target], "model": global_model_document(run)}
                log = out / "logs" / "hfl" / f"{name}.jsonl"
                _write_atomic(log, "".join(line + "\n" for line in run.log_lines()))
            path = out / "models" / variant / f"{name}.json"
            _write_atomic(path, json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
            written.append(str(path))
            logger.info("trained %s %s", variant, name)
    return written


def _load_models(cfg: dict, variant: str):
    out = Path(cfg["output_dir"])
    models, missing = {}, []
    for h in cfg["horizons"]:
        for target in cfg["targets"]:
            path = out / "models" / variant / f"{_task_name(h, target)}.json"
            if not path.is_file():
                missing.append(_task_name(h, target))
                continue
            doc = json.loads(path.read_text(encoding="utf-8"))
            _check_meta(doc, cfg, str(path))
            if variant == "cml":
                models[(h, target)] = gbt.from_document(doc["model"])
            else:
                forest, layer = load_global_model(doc["model"])
                models[(h, target)] = lambda X, f=forest, l=layer: predict_global(f, l, X)
    return models, missing


def cmd_evaluate(cfg: dict) -> dict:
    series, manifest, _, split = _load_store(cfg)
    spec = feature_spec(cfg)
    out = Path(cfg["output_dir"])
    reports_dir = out / "reports"
    available, absent = {}, {}
    for variant in ("cml", "hfl"):
        models, missing = _load_models(cfg, variant)
        if models and missing:
            raise RunError(f"{variant} models missing for tasks {missing}")
        if models:
            available[variant] = models
        else:
            absent[variant] = missing
    if not available:
        raise RunError(f"no trained models; missing tasks {sorted(set(sum(absent.values(), [])))}")

    tasks = {(h, t): build_task(series, spec, split, h, t) for h in cfg["horizons"] for t in cfg["targets"]}
    test = {k: part_matrices(v, "test") for k, v in tasks.items()}
    reports = {}
    for variant, models in available.items():
        label = "CML" if variant == "cml" else "HFL-global"
        rep = evalkit.evaluate(models, test, label, cfg["dataset"])
        reports[variant] = rep
        _write_atomic(reports_dir / f"metrics_{variant}.json", rep.to_json())
        _write_atomic(reports_dir / f"metrics_{variant}.csv", rep.to_table())

    summary = {"variants": sorted(reports)}
    if len(reports) == 2:
        gaps = evalkit.compare(reports["cml"], reports["hfl"])
        _write_atomic(reports_dir / "comparison.csv", evalkit.comparison_table(gaps))
    else:
        (only,) = reports
        summary["notice"] = f"only {only} models found; comparison omitted"
        logger.warning(summary["notice"])
        (reports_dir / "comparison.csv").unlink(missing_ok=True)

    # representative stations by horizon-1 RMSE of the federated model (or the only one)
    h_sel = min(cfg["horizons"])
    target = cfg["targets"][0]
    ref = "hfl" if "hfl" in available else "cml"
    mats = {m.station: m for m in test[(h_sel, target)]}
    rmse_map = evalkit.per_station_rmse(available[ref][(h_sel, target)], list(mats.values()))
    if len(rmse_map) >= 4:
        picks = evalkit.representative_stations(rmse_map)
        t0 = np.datetime64(manifest["t0"], "h")
        day = cfg["report"].get("day") or str(
            (t0 + np.timedelta64(split.valid_end + 24, "h")).astype("datetime64[D]")
        )
        chunks = []
        for h in cfg["horizons"]:
            mats_h = {m.station: m for m in test[(h, target)]}
            text = evalkit.station_day_series(
                mats_h, [s for _, s in picks], t0, day, {v: available[v][(h, target)] for v in sorted(available)}
            )
            chunks.append(text if not chunks else text.split("\n", 1)[1])
        _write_atomic(reports_dir / "representative_series.csv", "".join(chunks))
        _write_atomic(
            reports_dir / "representative_stations.json",
            json.dumps(
                {"reference": ref, "target": target, "horizon": h_sel, "day": day,
                 "stations": [{"percentile": p, "station": s, "rmse": rmse_map[s]} for p, s in picks]},
                indent=2, sort_keys=True,
            ) + "\n",
        )
    else:
        logger.warning("fewer than 4 stations; representative-station series skipped")
    return summary


def cmd_report(cfg: dict) -> str:
    reports_dir = Path(cfg["output_dir"]) / "reports"
    parts = []
    for variant in ("cml", "hfl"):
        p = reports_dir / f"metrics_{variant}.json"
        if p.is_file():
            parts.append(evalkit.MetricsReport.from_dict(json.loads(p.read_text())).to_table("\t"))
    if not parts:
        raise RunError(f"no metrics under {reports_dir}; run 'evaluate' first")
    comp = reports_dir / "comparison.csv"
    if comp.is_file():
        parts.append(comp.read_text())
    return "\n".join(parts)


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedbike", description=__doc__.split("\n")[0])
    ap.add_argument("--log", choices=("info", "debug"), default="info")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("ingest", "train", "evaluate", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--log", choices=("info", "debug"), default=argparse.SUPPRESS)
        if name == "train":
            sp.add_argument("--variant", required=True, choices=("cml", "hfl"))
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.log == "debug" else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        _validate(cfg)
        out = Path(cfg["output_dir"])
        with _lock(out):
            if args.command == "ingest":
                cmd_ingest(cfg)
            elif args.command == "train":
                cmd_train(cfg, args.variant)
            elif args.command == "evaluate":
                cmd_evaluate(cfg)
            else:
                print(cmd_report(cfg))
    except ConfigError as exc:
        print(f"fedbike: error: {exc}", file=sys.stderr)
        return 2
    except (RunError, ValueError, KeyError, OSError) as exc:
        print(f"fedbike: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
