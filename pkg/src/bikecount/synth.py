"""Seeded synthetic bike-share data with planted count-model truths.

Everything here is a pure function of its inputs and seed. Generated
weather, station maps, and status streams use the same CSV layouts that
:mod:`bikecount.ingest` reads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import ingest
from .errors import SpecError

ZIP_CODES = ("94107", "94301", "94041", "95113", "94063")

# Shape of the pooled network model: time of day, eight station effects,
# humidity and temperature. Station magnitudes follow the published table;
# the continuous slopes are scaled up so they are detectable at desk scale.
NETWORK_TRUTH = {
    "intercept": 2.0,
    "time_of_day": 0.03,
    "station_2": 0.467929,
    "station_5": 0.411846,
    "station_7": 0.290969,
    "station_10": 0.428846,
    "station_12": 0.186177,
    "station_14": 0.256,
    "station_16": 0.217112,
    "station_18": 0.290833,
    "mean_humidity": 0.012,
    "mean_temperature": -0.02,
}

# Per-station autoregressive truth: log mu = b0 + b1*Y(t-1) + b2*ToD + b3*Hu
STATION_TRUTH = {"intercept": 1.24, "lag_1": 0.1025, "time_of_day": -0.02, "mean_humidity": -0.005}


@dataclass(frozen=True)
class SynthSpec:
    n_stations: int = 10
    n_days: int = 28
    start_date: str = "2014-03-03"
    step: int = 15
    family: str = "negbin"
    theta: float = 5.0
    capacity: int = 19
    seed: int = 0
    planted: Mapping[str, float] = field(default_factory=lambda: dict(STATION_TRUTH))
    station_offset_sd: float = 0.15
    temp_mean: float = 62.0
    temp_amplitude: float = 8.0
    temp_noise_sd: float = 4.0
    humidity_base: float = 70.0
    humidity_sd: float = 10.0
    visibility_mean: float = 9.5
    wind_mean: float = 8.0
    precip_prob: float = 0.2
    precip_mean: float = 0.15
    fog_prob: float = 0.1
    zips: Sequence[str] = ZIP_CODES

    def __post_init__(self):
        if self.n_days < 1 or self.n_stations < 1:
            raise SpecError("need at least one day and one station")
        if self.family == "negbin" and not self.theta > 0:
            raise SpecError("theta must be positive for NB")
        if self.family not in ("poisson", "negbin"):
            raise SpecError(f"unknown family {self.family!r}")
        if 1440 % self.step:
            raise SpecError("grid step must divide a day")

    def rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *stream])


def _dates(spec: SynthSpec) -> pd.DatetimeIndex:
    return pd.date_range(pd.Timestamp(spec.start_date).normalize(), periods=spec.n_days, freq="D")


def gen_weather(spec: SynthSpec) -> pd.DataFrame:
    """Daily weather for every ZIP in the spec, in the weather-CSV layout.

    Temperature is an annual sinusoid plus noise, humidity is clamped noise
    around a base, precipitation is zero-inflated exponential, and events are
    rain above 0.05 in, else fog with a fixed probability.
    """
    dates = _dates(spec)
    doy = dates.dayofyear.to_numpy()
    frames = []
    for z, zip_code in enumerate(spec.zips):
        rng = spec.rng(1, z)
        nd = len(dates)
        temp = (spec.temp_mean + spec.temp_amplitude * np.sin(2 * np.pi * (doy - 105) / 365.25)
                + spec.temp_noise_sd * rng.standard_normal(nd))
        hum = np.clip(spec.humidity_base + spec.humidity_sd * rng.standard_normal(nd), 0, 100)
        vis = np.clip(spec.visibility_mean + rng.standard_normal(nd), 0, None)
        wind = np.clip(spec.wind_mean + 3 * rng.standard_normal(nd), 0, None)
        wet = rng.random(nd) < spec.precip_prob
        precip = np.where(wet, rng.exponential(spec.precip_mean, nd), 0.0)
        fog = rng.random(nd) < spec.fog_prob
        events = np.where(precip > 0.05, "Rain", np.where(fog, "Fog", ""))
        frames.append(pd.DataFrame({
            "date": dates.strftime("%Y-%m-%d"),
            "zip_code": zip_code,
            "mean_temperature_f": np.round(temp, 1),
            "mean_humidity": np.round(hum, 1),
            "mean_visibility_miles": np.round(vis, 1),
            "mean_wind_speed_mph": np.round(wind, 1),
            "precipitation_inches": np.round(precip, 2),
            "events": events,
        }))
    return pd.concat(frames, ignore_index=True)


def station_map(spec: SynthSpec) -> dict[int, str]:
    """Stations 1..n assigned round-robin to the spec's ZIPs."""
    return {s: spec.zips[(s - 1) % len(spec.zips)] for s in range(1, spec.n_stations + 1)}


def gen_counts(X, beta, family: str = "poisson", theta: float | None = None,
               seed: int = 0) -> np.ndarray:
    """Draw counts with log mu = X beta; NB through a gamma-Poisson mixture."""
    X = np.asarray(getattr(X, "values", X), dtype=float)
    eta = X @ np.asarray(beta, dtype=float)
    if not np.isfinite(eta).all() or eta.max() > 30:
        raise SpecError("linear predictor overflows; rescale beta")
    mu = np.exp(eta)
    rng = np.random.default_rng(seed)
    if family == "poisson":
        return rng.poisson(mu)
    if family != "negbin" or theta is None or not theta > 0:
        raise SpecError("NB draws need a positive theta")
    return rng.poisson(rng.gamma(theta, mu / theta))


def gen_status_stream(path: Sequence[int], station_id: int = 1, start="2014-03-03",
                      step: int = 15, capacity: int = 19) -> pd.DataFrame:
    """Expand a grid count path into minute-level status records.

    Each grid value is held for ``step`` minutes, so the stream covers
    ``len(path) * step`` minutes starting at ``start`` (which must be on the grid).
    """
    path = np.asarray(path, dtype=np.int64)
    if (path < 0).any():
        raise SpecError("negative bike counts")
    if (path > capacity).any():
        raise SpecError(f"count {int(path.max())} exceeds station capacity {capacity}")
    start = pd.Timestamp(start)
    if (start - start.normalize()) % pd.Timedelta(minutes=step) != pd.Timedelta(0):
        raise SpecError("stream start must sit on the grid")
    bikes = np.repeat(path, step)
    return pd.DataFrame({
        "station_id": np.full(len(bikes), station_id, dtype=np.int64),
        "bikes_available": bikes,
        "docks_available": capacity - bikes,
        "time": pd.date_range(start, periods=len(bikes), freq="min"),
    })


def _grid_times(spec: SynthSpec) -> pd.DatetimeIndex:
    per_day = 1440 // spec.step
    return pd.date_range(pd.Timestamp(spec.start_date).normalize(), periods=spec.n_days * per_day,
                         freq=pd.Timedelta(minutes=spec.step))


def gen_station_paths(spec: SynthSpec, weather: pd.DataFrame | None = None) -> dict[int, np.ndarray]:
    """Autoregressive grid count paths, one per station.

    log mu_t = planted intercept + station offset + sum of planted slopes
    times ``lag_1`` (previous count), ``time_of_day`` (hour), and daily weather
    fields; counts are clipped to the station capacity. Station 1 has no
    offset (it is the reference level).
    """
    weather = gen_weather(spec) if weather is None else weather
    wx = ingest.weather_frame(weather)
    zips = station_map(spec)
    times = _grid_times(spec)
    hours = times.hour.to_numpy()
    dates = times.normalize()
    planted = dict(spec.planted)
    b0 = planted.pop("intercept", 0.0)
    b_lag = planted.pop("lag_1", 0.0)
    b_tod = planted.pop("time_of_day", 0.0)
    offsets = spec.station_offset_sd * spec.rng(2).standard_normal(spec.n_stations)
    offsets[0] = 0.0
    paths = {}
    for s in range(1, spec.n_stations + 1):
        w = wx[wx["zip_code"] == zips[s]].set_index("date").reindex(dates)
        static = b0 + offsets[s - 1] + b_tod * hours
        for name, coef in planted.items():
            static = static + coef * w[name].to_numpy(dtype=float)
        rng = spec.rng(3, s)
        y = np.empty(len(times), dtype=np.int64)
        prev = int(rng.integers(0, spec.capacity + 1))
        for t in range(len(times)):
            mu = np.exp(static[t] + b_lag * prev)
            if spec.family == "negbin":
                mu = rng.gamma(spec.theta, mu / spec.theta)
            prev = min(int(rng.poisson(mu)), spec.capacity)
            y[t] = prev
        paths[s] = y
    return paths


def gen_dataset(spec: SynthSpec) -> dict[str, pd.DataFrame]:
    """Status, weather, and station-map frames in their CSV layouts."""
    weather = gen_weather(spec)
    paths = gen_station_paths(spec, weather)
    start = pd.Timestamp(spec.start_date).normalize()
    status = pd.concat([gen_status_stream(p, s, start, spec.step, spec.capacity)
                        for s, p in paths.items()], ignore_index=True)
    zips = station_map(spec)
    stations = pd.DataFrame({"station_id": list(zips), "zip_code": list(zips.values())})
    return {"status": status, "weather": weather, "stations": stations}


def write_dataset(spec: SynthSpec, out_dir) -> dict[str, str]:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = gen_dataset(spec)
    files = {}
    for name, frame in data.items():
        path = out / f"{name}.csv"
        frame = frame.copy()
        if "time" in frame:
            frame["time"] = frame["time"].dt.strftime("%Y-%m-%d %H:%M:%S")
        frame.to_csv(path, index=False)
        files[name] = str(path)
    return files


def planted_network_table(spec: SynthSpec, truth: Mapping[str, float] = NETWORK_TRUTH,
                          hours: Sequence[int] = tuple(range(24))) -> tuple[ingest.ObservationTable, dict]:
    """Pooled observation table whose counts follow a planted log-linear model.

    One row per station, day, and listed hour, carrying calendar and weather
    features for the station's ZIP. Returns the table and the planted truth
    keyed by design-column name (intercept included).
    """
    weather = ingest.weather_frame(gen_weather(spec))
    zips = station_map(spec)
    days = _dates(spec)
    grid = pd.MultiIndex.from_product([range(1, spec.n_stations + 1), days, hours],
                                      names=["station_id", "date", "hour"]).to_frame(index=False)
    grid["time"] = grid["date"] + pd.to_timedelta(grid["hour"], unit="h")
    rows = pd.concat([grid[["station_id", "time"]], ingest.calendar_features(grid["time"])], axis=1)
    rows["bikes_available"] = 0
    joined, _ = ingest.join_weather(rows, weather, zips)
    table = ingest.build_observation_table(joined, station_levels=list(zips))
    design = ingest.encode(table)
    unknown = set(truth) - set(design.columns)
    if unknown:
        raise SpecError(f"planted features not generable: {sorted(unknown)}")
    beta = np.array([truth.get(c, 0.0) for c in design.columns])
    y = gen_counts(design, beta, spec.family, spec.theta, seed=int(spec.rng(4).integers(2**62)))
    table = ingest.ObservationTable(y, table.features, table.roles)
    return table, dict(truth)


def planted_station_table(spec: SynthSpec, station_id: int = 3, lags: int = 1) -> ingest.ObservationTable:
    """Gridded single-station table (with lag columns) from :func:`gen_station_paths`.

    Goes through the full stream path: expand -> detect changes -> grid -> join.
    """
    data = gen_dataset(spec)
    status = data["status"]
    status = status[status["station_id"] == station_id]
    zips = dict(zip(data["stations"]["station_id"], data["stations"]["zip_code"]))
    table, _ = ingest.ingest_stations(status, ingest.weather_frame(data["weather"]), zips,
                                      step=spec.step, lags=lags)
    return table
