"""Command-line entry point: ``bikecount <command> [options]``.

Settings come from flags, then the ``BIKECOUNT_OUTPUT_DIR`` /
``BIKECOUNT_THREADS`` environment variables, then a JSON ``--config`` file,
then built-in defaults. Exit codes: 0 success, 1 computation failure,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, glm, ingest, pipeline, synth
from .errors import AlignmentError, BikeCountError
from .forest import ForestParams, fit_forest, permutation_importance

COMMANDS = ("ingest", "synth", "rank", "select", "fit", "predict", "network-study",
            "station-study", "plot-data")

# key -> (default, kind); kind drives flag parsing and validation
KEYS = {
    "status": (None, "path"),
    "weather": (None, "path"),
    "stations": (None, "path"),
    "table": (None, "path"),
    "model": (None, "path"),
    "rows": (None, "path"),
    "output_dir": ("out", "str"),
    "family": ("negbin", ("poisson", "negbin")),
    "seed": (0, "int"),
    "n_trees": (100, "int"),
    "features_per_split": (None, "int"),
    "min_leaf_size": (5, "int"),
    "max_depth": (None, "int"),
    "elbow_override": (None, "int"),
    "candidates": (None, "list"),
    "features": (None, "list"),
    "collinearity_threshold": (0.9, "float"),
    "max_steps": (None, "int"),
    "split": (0.8, "float"),
    "split_mode": ("random", ("random", "contiguous")),
    "lag": (1, "int"),
    "step": (15, "int"),
    "join_policy": ("fail", ("fail", "drop")),
    "snow_level": (False, "bool"),
    "station": (None, "intlist"),
    "min_rows": (50, "int"),
    "threads": (1, "int"),
    "mode": ("network", ("network", "station")),
    "n_stations": (10, "int"),
    "n_days": (28, "int"),
    "theta": (5.0, "float"),
}
ENV = {"output_dir": "BIKECOUNT_OUTPUT_DIR", "threads": "BIKECOUNT_THREADS"}
RAW_PATHS = ("status", "weather", "stations")
# settings that cannot change any output; left out of the config hash
UNHASHED = ("output_dir", "threads")


class UsageError(Exception):
    """Configuration problem; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def output(self) -> Path:
        return Path(self.values["output_dir"])

    def forest(self) -> ForestParams:
        return ForestParams(self.n_trees, self.features_per_split, self.min_leaf_size,
                            self.max_depth, self.seed)


def _coerce(key: str, value):
    kind = KEYS[key][1]
    if value is None:
        return None
    try:
        if isinstance(kind, tuple):
            if value not in kind:
                raise ValueError(f"must be one of {', '.join(kind)}")
            return value
        if kind in ("path", "str"):
            if not isinstance(value, str):
                raise ValueError("expected a string")
            return value
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError("expected an integer")
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError("expected a number")
            return float(value)
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError("expected true or false")
                return value.lower() in ("true", "1")
            return bool(value)
        if kind == "list":
            items = value.split(",") if isinstance(value, str) else list(value)
            return [str(v).strip() for v in items if str(v).strip()]
        if kind == "intlist":
            items = value.split(",") if isinstance(value, str) else (
                value if isinstance(value, list) else [value])
            return [int(v) for v in items]
    except (TypeError, ValueError) as exc:
        raise UsageError(key, f"invalid value {value!r} ({exc})") from None
    raise AssertionError(kind)


def _required(command: str, values: dict) -> list[str]:
    if command == "ingest":
        return list(RAW_PATHS)
    if command in ("rank", "select", "fit", "plot-data"):
        return ["table"]
    if command == "predict":
        return ["model", "rows"]
    if command in ("network-study", "station-study"):
        return [] if values.get("table") else list(RAW_PATHS)
    return []


def _check(values: dict, command: str) -> None:
    for key in _required(command, values):
        if values.get(key) is None:
            raise UsageError(key, f"required for {command}")
    for key, (_, kind) in KEYS.items():
        if kind == "path" and values.get(key) is not None and not Path(values[key]).exists():
            raise UsageError(key, f"path does not exist: {values[key]}")
    if not 0 < values["split"] < 1:
        raise UsageError("split", "must lie strictly between 0 and 1")
    if not 1 <= values["lag"] <= 7:
        raise UsageError("lag", "must be in 1..7")
    if values["step"] < 1 or 1440 % values["step"]:
        raise UsageError("step", "must be a positive divisor of 1440 minutes")
    if values["threads"] < 1:
        raise UsageError("threads", "must be at least 1")
    if values["n_trees"] < 1:
        raise UsageError("n_trees", "must be at least 1")
    if values["theta"] <= 0:
        raise UsageError("theta", "must be positive")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (keys as in the README)")
    for key, (default, kind) in KEYS.items():
        flag = "--" + key.replace("_", "-")
        if kind == "bool":
            common.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        elif kind == "intlist":
            common.add_argument(flag, dest=key, action="append", default=None,
                                help="repeatable or comma-separated")
        else:
            common.add_argument(flag, dest=key, default=None,
                                help=f"default: {default}" if default is not None else None)
    parser = argparse.ArgumentParser(prog="bikecount", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def parse_and_validate(argv=None, environ=None) -> RunConfig:
    """Merge flags > environment > config file > defaults and validate."""
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    values = {k: d for k, (d, _) in KEYS.items()}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError("config", f"file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError("config", f"not valid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError("config", "top level must be an object")
        for key, value in loaded.items():
            if key not in KEYS:
                raise UsageError(key, "unknown configuration key")
            values[key] = _coerce(key, value)
    for key, var in ENV.items():
        if environ.get(var):
            values[key] = _coerce(key, environ[var])
    for key in KEYS:
        flag = getattr(args, key)
        if flag is not None:
            if KEYS[key][1] == "intlist":
                flag = ",".join(flag)
            values[key] = _coerce(key, flag)
    _check(values, args.command)
    return RunConfig(args.command, values)


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: RunConfig) -> str:
    """Hash of every output-relevant setting; input paths enter by content."""
    items = {"command": config.command}
    for key, value in config.values.items():
        if key in UNHASHED:
            continue
        if KEYS[key][1] == "path" and value is not None:
            value = {"sha256": sha256_file(value)}
            schema = ingest.schema_path(config.values[key])
            if key == "table" and schema.exists():
                value["schema_sha256"] = sha256_file(schema)
        items[key] = value
    blob = json.dumps(items, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(config: RunConfig, files) -> Path:
    out = config.output
    entries = [{"path": Path(f).relative_to(out).as_posix(), "sha256": sha256_file(f)}
               for f in sorted(set(map(Path, files)))]
    manifest = {"command": config.command, "config_hash": config_hash(config),
                "seed": config.seed, "version": __version__, "files": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _load_raw(cfg: RunConfig):
    status = ingest.read_status_csv(cfg.status)
    weather = ingest.read_weather_csv(cfg.weather, snow_level=cfg.snow_level)
    zips = ingest.read_station_map(cfg.stations)
    return status, weather, zips


def _table(cfg: RunConfig, mode: str) -> ingest.ObservationTable:
    if cfg.table is not None:
        return ingest.ObservationTable.read(cfg.table)
    status, weather, zips = _load_raw(cfg)
    if mode == "network":
        table, _ = ingest.ingest_network(status, weather, zips, cfg.join_policy, cfg.snow_level)
    else:
        table, _ = ingest.ingest_stations(status, weather, zips, cfg.step, cfg.lag,
                                          cfg.join_policy, cfg.snow_level)
    return table


def cmd_synth(cfg: RunConfig) -> list:
    spec = synth.SynthSpec(n_stations=cfg.n_stations, n_days=cfg.n_days, step=cfg.step,
                           family=cfg.family, theta=cfg.theta, seed=cfg.seed)
    return list(synth.write_dataset(spec, cfg.output).values())


def cmd_ingest(cfg: RunConfig) -> list:
    status, weather, zips = _load_raw(cfg)
    if cfg.mode == "network":
        table, report = ingest.ingest_network(status, weather, zips, cfg.join_policy,
                                              cfg.snow_level)
    else:
        table, report = ingest.ingest_stations(status, weather, zips, cfg.step, cfg.lag,
                                               cfg.join_policy, cfg.snow_level)
    path = cfg.output / "observations.csv"
    sidecar = table.write(path)
    join = cfg.output / "join_report.json"
    pipeline.dump_json({"n_input": report.n_input, "n_dropped": report.n_dropped,
                        "dropped_keys": report.dropped_keys}, join)
    return [path, sidecar, join]


def _design(cfg: RunConfig, table):
    design = ingest.encode(table, cfg.features if cfg.features else None)
    if cfg.candidates:
        design = pipeline.restrict_candidates(design, cfg.candidates)
    design, _ = pipeline._drop_constant(design)
    return design


def cmd_rank(cfg: RunConfig) -> list:
    table = ingest.ObservationTable.read(cfg.table)
    design = _design(cfg, table)
    forest = fit_forest(design, table.response, cfg.forest(), n_jobs=cfg.threads)
    ranking = permutation_importance(forest, design, table.response, n_jobs=cfg.threads)
    path = cfg.output / "importance.csv"
    ranking.to_csv(path)
    return [path]


def cmd_select(cfg: RunConfig) -> list:
    table = ingest.ObservationTable.read(cfg.table)
    design = _design(cfg, table)
    out = pipeline._rank_and_select(design, table.response, cfg.family, cfg.forest(),
                                    cfg.max_steps, cfg.elbow_override, cfg.threads)
    files = [cfg.output / "bic_curve.csv", cfg.output / "importance.csv",
             cfg.output / "selection.json"]
    out.trace.to_csv(files[0])
    out.ranking.to_csv(files[1])
    pipeline.dump_json({"ranked": out.ranked, "elbow": out.elbow.to_dict(),
                        "null_bic": out.null_bic, "chosen": out.chosen}, files[2])
    return files


def cmd_fit(cfg: RunConfig) -> list:
    table = ingest.ObservationTable.read(cfg.table)
    design = _design(cfg, table)
    model = pipeline._quiet(glm.fit, design, table.response, family=cfg.family)
    files = [cfg.output / "model.json"]
    pipeline.dump_json(model.to_dict(), files[0])
    wald, err = pipeline._wald_table(model)
    if wald is not None:
        files.append(cfg.output / "wald.csv")
        wald.to_csv(files[-1], index=False, float_format="%.17g")
    else:
        print(f"warning: Wald inference unavailable ({err})", file=sys.stderr)
    return files


def cmd_predict(cfg: RunConfig) -> list:
    model = glm.FittedCountModel.from_json(cfg.model)
    rows = pd.read_csv(cfg.rows)
    missing = [c for c in model.columns[1:] if c not in rows.columns]
    if missing:
        raise AlignmentError(f"rows file lacks model columns: {missing}")
    X = np.column_stack([np.ones(len(rows))] + [rows[c].to_numpy(dtype=float)
                                                for c in model.columns[1:]])
    out = rows.copy()
    out["mu"] = glm.predict_mean(model, X) if len(rows) else np.array([])
    path = cfg.output / "predictions.csv"
    out.to_csv(path, index=False, float_format="%.17g")
    return [path]


def cmd_network_study(cfg: RunConfig) -> list:
    table = _table(cfg, "network")
    conf = pipeline.NetworkStudyConfig(cfg.family, cfg.forest(), cfg.candidates,
                                       cfg.collinearity_threshold, cfg.elbow_override,
                                       cfg.max_steps, cfg.threads)
    report = pipeline.run_network_study(table, conf)
    return report.write(cfg.output)


def cmd_station_study(cfg: RunConfig) -> list:
    table = _table(cfg, "station")
    if cfg.station:
        ids = list(cfg.station)
    elif "station" in table.roles:
        ids = sorted(int(s) for s in np.unique(table.features["station"]))
    else:
        ids = [0]
    conf = pipeline.StationStudyConfig(cfg.family, cfg.split, cfg.split_mode, cfg.seed,
                                       cfg.min_rows, cfg.forest(), cfg.elbow_override,
                                       cfg.max_steps, 1)

    def one(sid):
        return pipeline.run_station_study(table, conf, sid)

    if cfg.threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            reports = list(pool.map(one, ids))
    else:
        reports = [one(s) for s in ids]
    return pipeline.write_station_reports(reports, cfg.output)


def cmd_plot_data(cfg: RunConfig) -> list:
    table = ingest.ObservationTable.read(cfg.table)
    path = cfg.output / "count_histogram.csv"
    pipeline._histogram(table.response).to_csv(path, index=False)
    return [path]


HANDLERS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "rank": cmd_rank, "select": cmd_select,
    "fit": cmd_fit, "predict": cmd_predict, "network-study": cmd_network_study,
    "station-study": cmd_station_study, "plot-data": cmd_plot_data,
}


def dispatch(cfg: RunConfig) -> int:
    cfg.output.mkdir(parents=True, exist_ok=True)
    try:
        files = HANDLERS[cfg.command](cfg)
    except (BikeCountError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"bikecount {cfg.command}: {exc}", file=sys.stderr)
        return 1
    manifest = write_manifest(cfg, files)
    print(f"wrote {len(files)} files and {manifest}")
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_and_validate(argv)
    except UsageError as exc:
        print(f"bikecount: configuration error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
