"""Station status ingestion: change detection, grid resampling, weather join, encoding.

Data flows through pandas frames. A status stream is a frame with columns
``station_id, bikes_available, docks_available, time``; the functions here
turn it into modeling rows and finally a dense design matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigurationError,
    CoverageError,
    EmptyInputError,
    EncodingError,
    InputOrderError,
    MissingWeatherError,
)

STATUS_COLUMNS = ("station_id", "bikes_available", "docks_available", "time")
WEATHER_CSV_COLUMNS = (
    "date",
    "zip_code",
    "mean_temperature_f",
    "mean_humidity",
    "mean_visibility_miles",
    "mean_wind_speed_mph",
    "precipitation_inches",
    "events",
)
# CSV column -> table feature name, units
WEATHER_FEATURES = {
    "mean_temperature_f": ("mean_temperature", "degF"),
    "mean_humidity": ("mean_humidity", "percent"),
    "mean_visibility_miles": ("mean_visibility", "miles"),
    "mean_wind_speed_mph": ("mean_wind_speed", "mph"),
    "precipitation_inches": ("precipitation", "inches"),
}
WEATHER_CONTINUOUS = tuple(name for name, _ in WEATHER_FEATURES.values())

TRACE_PRECIPITATION = 0.01
EVENT_LEVELS = ("none", "rain", "fog")

# canonical design-column group order
GROUP_ORDER = ("station", "month", "day", "time_of_day", "weather", "event", "lag")


@dataclass(frozen=True)
class StatusRecord:
    station_id: int
    bikes_available: int
    docks_available: int
    timestamp: pd.Timestamp


@dataclass(frozen=True)
class WeatherDay:
    date: pd.Timestamp
    zip_code: str
    mean_temperature: float
    mean_humidity: float
    mean_visibility: float
    mean_wind_speed: float
    precipitation: float
    events: str = "none"


def as_status_frame(stream) -> pd.DataFrame:
    """Coerce a frame or a sequence of :class:`StatusRecord` into a status frame."""
    if isinstance(stream, pd.DataFrame):
        frame = stream
    else:
        rows = [
            (r.station_id, r.bikes_available, r.docks_available, r.timestamp)
            for r in stream
        ]
        frame = pd.DataFrame(rows, columns=list(STATUS_COLUMNS))
    if "time" in frame and not pd.api.types.is_datetime64_any_dtype(frame["time"]):
        frame = frame.assign(time=pd.to_datetime(frame["time"]))
    return frame


def calendar_features(times: pd.Series) -> pd.DataFrame:
    """Month 1-12, day of week 1-7 with Sunday = 1, hour of day 0-23."""
    times = pd.to_datetime(pd.Series(times)).reset_index(drop=True)
    return pd.DataFrame(
        {
            "month": times.dt.month.astype(np.int64),
            "day_of_week": ((times.dt.dayofweek + 1) % 7 + 1).astype(np.int64),
            "time_of_day": times.dt.hour.astype(np.int64),
        }
    )


def _check_stream(frame: pd.DataFrame) -> None:
    if len(frame) == 0:
        raise EmptyInputError("status stream is empty")
    if frame["station_id"].nunique() > 1:
        raise ConfigurationError(
            "stream holds several stations; use detect_changes_all"
        )
    t = frame["time"].to_numpy()
    if len(t) > 1 and not (t[1:] > t[:-1]).all():
        bad = int(np.argmax(~(t[1:] > t[:-1]))) + 1
        raise InputOrderError(
            f"timestamps not strictly increasing at position {bad} ({frame['time'].iloc[bad]})"
        )


def detect_changes(stream) -> pd.DataFrame:
    """Keep the first record and every record whose bike count differs from the last kept one.

    Since kept records are exactly the positions where the count changes
    relative to the immediately preceding record, a vectorized
    ``value != shift(value)`` comparison suffices.
    """
    frame = as_status_frame(stream)
    _check_stream(frame)
    bikes = frame["bikes_available"].to_numpy()
    keep = np.ones(len(bikes), dtype=bool)
    keep[1:] = bikes[1:] != bikes[:-1]
    events = frame.loc[keep, ["station_id", "bikes_available", "time"]].reset_index(drop=True)
    return pd.concat([events, calendar_features(events["time"])], axis=1)


def detect_changes_all(frame: pd.DataFrame) -> pd.DataFrame:
    """Run :func:`detect_changes` per station, stations in ascending id order."""
    frame = as_status_frame(frame)
    if len(frame) == 0:
        raise EmptyInputError("status stream is empty")
    parts = [detect_changes(g) for _, g in frame.groupby("station_id", sort=True)]
    return pd.concat(parts, ignore_index=True)


def _grid_instants(first, last, step, start=None, end=None) -> pd.DatetimeIndex:
    delta = pd.Timedelta(minutes=step)
    origin = first.normalize()
    if start is None:
        start = origin + delta * int(np.ceil((first - origin) / delta))
    else:
        start = pd.Timestamp(start)
        if start < first:
            raise CoverageError(f"grid start {start} precedes first observation {first}")
        if (start - start.normalize()) % delta != pd.Timedelta(0):
            raise ValueError(f"grid start {start} is not aligned to a {step}-minute grid")
    end = last if end is None else pd.Timestamp(end)
    if end < start:
        return pd.DatetimeIndex([])
    return pd.date_range(start, end, freq=delta)


def locf(times, values, instants) -> np.ndarray:
    """Value of the most recent observation at or before each instant."""
    pos = np.searchsorted(np.asarray(times), np.asarray(instants), side="right") - 1
    if (pos < 0).any():
        raise CoverageError("instant precedes the first observation")
    return np.asarray(values)[pos]


def resample_grid(stream, step: int = 15, lags: int = 1, start=None, end=None) -> pd.DataFrame:
    """Sample a single-station stream on a fixed grid and attach lagged counts.

    Parameters
    ----------
    stream : DataFrame or sequence of StatusRecord
        Records (raw or change events) for one station, strictly increasing in time.
    step : int
        Grid spacing in minutes. Grid instants sit on whole multiples of
        ``step`` counted from midnight of the first observation's day.
    lags : int
        Number of lag columns ``lag_1 .. lag_L`` (1..7). The first ``lags``
        grid rows are dropped because their lag window is incomplete.
    start, end : timestamp, optional
        Grid bounds. ``end`` defaults to the last observation; grid
        instants may extend past it, in which case the last value carries forward.

    Returns
    -------
    DataFrame with ``station_id, time, bikes_available, lag_1..lag_L`` and
    calendar columns.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not 1 <= lags <= 7:
        raise ValueError("lag depth must be in 1..7")
    frame = as_status_frame(stream)
    _check_stream(frame)
    times = frame["time"]
    grid = _grid_instants(times.iloc[0], times.iloc[-1], step, start, end)
    values = locf(times.to_numpy(), frame["bikes_available"].to_numpy(), grid.to_numpy())
    out = pd.DataFrame(
        {
            "station_id": np.full(len(grid), frame["station_id"].iloc[0], dtype=np.int64),
            "time": grid,
            "bikes_available": values.astype(np.int64),
        }
    )
    for k in range(1, lags + 1):
        out[f"lag_{k}"] = out["bikes_available"].shift(k)
    out = out.iloc[lags:].reset_index(drop=True)
    for k in range(1, lags + 1):
        out[f"lag_{k}"] = out[f"lag_{k}"].astype(np.int64)
    return pd.concat([out, calendar_features(out["time"])], axis=1)


def resample_grid_all(frame: pd.DataFrame, step: int = 15, lags: int = 1) -> pd.DataFrame:
    """Change-detect and grid every station of a raw stream.

    Each station's grid runs to its last raw record, not its last change.
    """
    frame = as_status_frame(frame)
    if len(frame) == 0:
        raise EmptyInputError("status stream is empty")
    parts = [resample_grid(detect_changes(g), step, lags, end=g["time"].iloc[-1])
             for _, g in frame.groupby("station_id", sort=True)]
    return pd.concat(parts, ignore_index=True)


# ---------------------------------------------------------------------------
# Weather


def normalize_event(text, snow_level: bool = False) -> str:
    """Fold a free-text weather event to none / rain / fog (/ snow)."""
    if text is None or (isinstance(text, float) and np.isnan(text)):
        return "none"
    s = str(text).strip().lower()
    if "rain" in s:
        return "rain"
    if "fog" in s:
        return "fog"
    if snow_level and "snow" in s:
        return "snow"
    return "none"


def parse_precipitation(value) -> float:
    """Inches of precipitation; the trace marker ``T`` maps to 0.01."""
    if isinstance(value, str):
        s = value.strip()
        if s.upper() == "T":
            return TRACE_PRECIPITATION
        if s == "":
            return float("nan")
        return float(s)
    return float(value)


def event_levels(snow_level: bool = False) -> tuple[str, ...]:
    return EVENT_LEVELS + (("snow",) if snow_level else ())


def read_status_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(STATUS_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigurationError(f"status file {path} lacks columns {sorted(missing)}")
    frame = frame[list(STATUS_COLUMNS)].copy()
    frame["time"] = pd.to_datetime(frame["time"])
    return frame.sort_values(["station_id", "time"], kind="mergesort").reset_index(drop=True)


def read_weather_csv(path, snow_level: bool = False) -> pd.DataFrame:
    """Load daily weather; returns columns date, zip_code, the five continuous fields, events."""
    raw = pd.read_csv(path, dtype={"zip_code": str, "precipitation_inches": str, "events": str},
                      keep_default_na=False)
    missing = set(WEATHER_CSV_COLUMNS) - set(raw.columns)
    if missing:
        raise ConfigurationError(f"weather file {path} lacks columns {sorted(missing)}")
    return weather_frame(raw, snow_level=snow_level)


def weather_frame(raw: pd.DataFrame, snow_level: bool = False) -> pd.DataFrame:
    """Normalize a weather table in CSV layout into the internal layout."""
    out = pd.DataFrame(
        {
            "date": pd.to_datetime(raw["date"]).dt.normalize(),
            "zip_code": raw["zip_code"].astype(str).str.strip(),
        }
    )
    for src, (name, _) in WEATHER_FEATURES.items():
        if src == "precipitation_inches":
            out[name] = [parse_precipitation(v) for v in raw[src]]
        else:
            out[name] = pd.to_numeric(raw[src].replace("", np.nan), errors="coerce")
    out["events"] = [normalize_event(v, snow_level) for v in raw["events"]]
    hum = out["mean_humidity"].dropna()
    if ((hum < 0) | (hum > 100)).any():
        raise ValueError("mean_humidity outside [0, 100]")
    if (out["precipitation"].dropna() < 0).any():
        raise ValueError("negative precipitation")
    dup = out.duplicated(["date", "zip_code"])
    if dup.any():
        first = out.loc[dup].iloc[0]
        raise ValueError(f"duplicate weather record for ({first['date'].date()}, {first['zip_code']})")
    return out


def read_station_map(path) -> dict[int, str]:
    frame = pd.read_csv(path, dtype={"zip_code": str})
    if not {"station_id", "zip_code"} <= set(frame.columns):
        raise ConfigurationError(f"station map {path} needs station_id,zip_code columns")
    return {int(s): str(z).strip() for s, z in zip(frame["station_id"], frame["zip_code"])}


@dataclass
class JoinReport:
    n_input: int
    n_dropped: int = 0
    dropped_keys: list = field(default_factory=list)


def join_weather(rows: pd.DataFrame, weather: pd.DataFrame, station_zip: Mapping[int, str],
                 policy: str = "fail") -> tuple[pd.DataFrame, JoinReport]:
    """Attach each row's daily weather by exact (date, station ZIP) match.

    ``policy="fail"`` raises :class:`MissingWeatherError` on the first row
    without a weather record; ``policy="drop"`` removes such rows and lists
    them in the returned report.
    """
    if policy not in ("fail", "drop"):
        raise ConfigurationError(f"unknown missing-weather policy {policy!r}")
    unmapped = sorted(set(rows["station_id"].unique()) - set(station_zip))
    if unmapped:
        raise ConfigurationError(f"stations without a ZIP mapping: {unmapped}")
    keyed = rows.reset_index(drop=True).assign(
        date=pd.to_datetime(rows["time"]).dt.normalize().to_numpy(),
        zip_code=rows["station_id"].map(station_zip).astype(str).to_numpy(),
    )
    merged = keyed.merge(weather, on=["date", "zip_code"], how="left", indicator=True,
                         validate="many_to_one")
    value_cols = [c for c in weather.columns if c not in ("date", "zip_code")]
    missing = (merged["_merge"] != "both") | merged[value_cols].isna().any(axis=1)
    report = JoinReport(n_input=len(rows))
    if missing.any():
        bad = merged.loc[missing]
        if policy == "fail":
            r = bad.iloc[0]
            raise MissingWeatherError(
                f"no weather for row {bad.index[0]} (station {r['station_id']}, "
                f"date {r['date'].date()}, zip {r['zip_code']})"
            )
        report.n_dropped = int(missing.sum())
        report.dropped_keys = [
            (int(i), int(s), str(d.date()), z)
            for i, s, d, z in zip(bad.index, bad["station_id"], bad["date"], bad["zip_code"])
        ]
        merged = merged.loc[~missing]
    return merged.drop(columns="_merge").reset_index(drop=True), report


# ---------------------------------------------------------------------------
# Observation table and encoding


@dataclass(frozen=True)
class FeatureRole:
    kind: str  # "categorical" | "continuous"
    group: str
    levels: tuple = ()
    reference: object = None
    units: str = ""

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "group": self.group}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
            d["reference"] = self.reference
        else:
            d["units"] = self.units
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureRole":
        return cls(kind=d["kind"], group=d["group"], levels=tuple(d.get("levels", ())),
                   reference=d.get("reference"), units=d.get("units", ""))


@dataclass
class ObservationTable:
    """Response counts plus named feature columns with declared roles."""

    response: np.ndarray
    features: pd.DataFrame
    roles: dict[str, FeatureRole]
    response_name: str = "bikes_available"

    def __post_init__(self):
        self.response = np.asarray(self.response)
        if len(self.response) != len(self.features):
            raise ValueError("response length differs from feature rows")
        if len(self.response) and (self.response < 0).any():
            raise ValueError("negative counts in response")
        missing = set(self.roles) - set(self.features.columns)
        if missing:
            raise ValueError(f"roles declared for absent columns {sorted(missing)}")
        if self.features[list(self.roles)].isna().any().any():
            raise ValueError("observation table has missing cells")

    @property
    def n_rows(self) -> int:
        return len(self.response)

    @property
    def feature_names(self) -> list[str]:
        return list(self.roles)

    def subset_rows(self, index) -> "ObservationTable":
        index = np.asarray(index)
        return ObservationTable(self.response[index],
                                self.features.iloc[index].reset_index(drop=True),
                                dict(self.roles), self.response_name)

    def continuous(self) -> list[str]:
        return [n for n, r in self.roles.items() if r.kind == "continuous"]

    def write(self, path) -> Path:
        """Write CSV plus a ``.schema.json`` sidecar; returns the sidecar path."""
        path = Path(path)
        frame = self.features[list(self.roles)].copy()
        frame.insert(0, self.response_name, self.response)
        frame.to_csv(path, index=False)
        schema = {"response": self.response_name,
                  "features": {n: r.to_dict() for n, r in self.roles.items()}}
        sidecar = schema_path(path)
        sidecar.write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
        return sidecar

    @classmethod
    def read(cls, path) -> "ObservationTable":
        path = Path(path)
        schema = json.loads(schema_path(path).read_text())
        roles = {n: FeatureRole.from_dict(d) for n, d in schema["features"].items()}
        dtypes = {n: str for n, r in roles.items()
                  if r.kind == "categorical" and r.levels and isinstance(r.levels[0], str)}
        frame = pd.read_csv(path, dtype=dtypes, keep_default_na=False)
        resp = schema["response"]
        return cls(frame[resp].to_numpy(np.int64), frame[list(roles)].reset_index(drop=True),
                   roles, resp)


def schema_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".schema.json")


def build_observation_table(rows: pd.DataFrame, station_levels: Sequence[int] | None = None,
                            include_station: bool = True, snow_level: bool = False,
                            weather: Sequence[str] = WEATHER_CONTINUOUS) -> ObservationTable:
    """Assemble modeling rows (events or grid rows joined with weather) into a table.

    Reference levels: the lowest station id, January, Sunday, no weather event.
    Any ``lag_k`` columns in ``rows`` become continuous lag features.
    """
    roles: dict[str, FeatureRole] = {}
    cols = {}
    if include_station:
        levels = tuple(sorted(int(s) for s in (station_levels if station_levels is not None
                                               else rows["station_id"].unique())))
        roles["station"] = FeatureRole("categorical", "station", levels, levels[0])
        cols["station"] = rows["station_id"].astype(np.int64).to_numpy()
    roles["month"] = FeatureRole("categorical", "month", tuple(range(1, 13)), 1)
    roles["day_of_week"] = FeatureRole("categorical", "day", tuple(range(1, 8)), 1)
    roles["time_of_day"] = FeatureRole("continuous", "time_of_day", units="hour")
    cols["month"] = rows["month"].to_numpy()
    cols["day_of_week"] = rows["day_of_week"].to_numpy()
    cols["time_of_day"] = rows["time_of_day"].to_numpy()
    units = {name: u for name, u in WEATHER_FEATURES.values()}
    for name in weather:
        roles[name] = FeatureRole("continuous", "weather", units=units.get(name, ""))
        cols[name] = rows[name].to_numpy(dtype=float)
    if "events" in rows:
        lv = event_levels(snow_level)
        roles["events"] = FeatureRole("categorical", "event", lv, "none")
        cols["events"] = rows["events"].astype(str).to_numpy()
    lag_cols = sorted((c for c in rows.columns if c.startswith("lag_")),
                      key=lambda c: int(c.split("_")[1]))
    for c in lag_cols:
        roles[c] = FeatureRole("continuous", "lag", units="bikes")
        cols[c] = rows[c].to_numpy(dtype=float)
    features = pd.DataFrame(cols)
    return ObservationTable(rows["bikes_available"].to_numpy(np.int64), features, roles)


@dataclass
class DesignMatrix:
    """Dense design with the intercept in column 0."""

    values: np.ndarray
    columns: list[str]
    blocks: dict[str, list[str]] = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def index(self, name: str) -> int:
        return self.columns.index(name)

    def predictors(self) -> list[str]:
        return self.columns[1:]

    def subset(self, names: Iterable[str]) -> "DesignMatrix":
        """Intercept plus ``names`` in the given order."""
        names = list(names)
        idx = [0] + [self.columns.index(n) for n in names]
        blocks = {f: [c for c in cols if c in names] for f, cols in self.blocks.items()}
        return DesignMatrix(self.values[:, idx], [self.columns[0]] + names,
                            {f: c for f, c in blocks.items() if c})

    def rows(self, index) -> "DesignMatrix":
        return DesignMatrix(self.values[np.asarray(index)], list(self.columns), dict(self.blocks))


def _dummy_name(feature: str, group: str, level) -> str:
    prefix = {"station": "station", "month": "month", "day": "day", "event": "events"}.get(group, feature)
    return f"{prefix}_{level}"


def encode(table: ObservationTable, features: Sequence[str] | None = None,
           standardize: bool = False) -> DesignMatrix:
    """Dummy-code categoricals (reference omitted) and copy continuous features.

    Columns come out in the fixed group order intercept, stations, months,
    days, time of day, continuous weather, weather events, lags, whatever the
    order of ``features``. ``standardize`` z-scores continuous columns.
    """
    names = table.feature_names if features is None else list(features)
    for n in names:
        if n not in table.roles:
            raise KeyError(f"feature {n!r} not in table")
    rank = {g: i for i, g in enumerate(GROUP_ORDER)}
    ordered = sorted(names, key=lambda n: (rank[table.roles[n].group], table.feature_names.index(n)))
    n = table.n_rows
    blocks_out = []
    columns = ["intercept"]
    blocks: dict[str, list[str]] = {}
    for name in ordered:
        role = table.roles[name]
        cell = table.features[name].to_numpy()
        if role.kind == "categorical":
            levels = list(role.levels)
            lookup = {lv: i for i, lv in enumerate(levels)}
            try:
                codes = np.fromiter((lookup[v] for v in cell), dtype=np.int64, count=n)
            except KeyError as exc:
                raise EncodingError(name, exc.args[0]) from None
            ref = lookup[role.reference]
            kept = [i for i in range(len(levels)) if i != ref]
            block = (codes[:, None] == np.asarray(kept)[None, :]).astype(float)
            cnames = [_dummy_name(name, role.group, levels[i]) for i in kept]
        else:
            block = cell.astype(float)[:, None]
            if standardize:
                sd = block.std()
                block = (block - block.mean()) / (sd if sd > 0 else 1.0)
            cnames = [name]
        blocks_out.append(block)
        columns.extend(cnames)
        blocks[name] = cnames
    values = np.hstack([np.ones((n, 1))] + blocks_out) if blocks_out else np.ones((n, 1))
    return DesignMatrix(values, columns, blocks)


def expected_width(table: ObservationTable, features: Sequence[str] | None = None) -> int:
    """p = 1 + sum(levels - 1) + number of continuous features."""
    names = table.feature_names if features is None else features
    return 1 + sum(len(table.roles[n].levels) - 1 if table.roles[n].kind == "categorical" else 1
                   for n in names)


def ingest_network(status: pd.DataFrame, weather: pd.DataFrame, station_zip: Mapping[int, str],
                   policy: str = "fail", snow_level: bool = False) -> tuple[ObservationTable, JoinReport]:
    """Raw status stream -> change events -> weather join -> pooled table."""
    events = detect_changes_all(status)
    joined, report = join_weather(events, weather, station_zip, policy)
    levels = sorted(set(int(s) for s in station_zip) | set(events["station_id"].unique()))
    return build_observation_table(joined, station_levels=levels, snow_level=snow_level), report


def ingest_stations(status: pd.DataFrame, weather: pd.DataFrame, station_zip: Mapping[int, str],
                    step: int = 15, lags: int = 1, policy: str = "fail",
                    snow_level: bool = False) -> tuple[ObservationTable, JoinReport]:
    """Raw status stream -> gridded per-station rows with lags -> weather join -> table."""
    grid = resample_grid_all(status, step, lags)
    joined, report = join_weather(grid, weather, station_zip, policy)
    levels = sorted(set(int(s) for s in station_zip) | set(grid["station_id"].unique()))
    return build_observation_table(joined, station_levels=levels, snow_level=snow_level), report
