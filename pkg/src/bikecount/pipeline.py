"""Network-level and per-station studies built from the glm, forest and select modules."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import glm
from .errors import BikeCountError, EmptyInputError, InferenceUnavailableError
from .forest import ForestParams, fit_forest, oob_error, permutation_importance, rank_features
from .ingest import DesignMatrix, ObservationTable, encode
from .select import (
    CollinearityReport,
    Elbow,
    SelectionTrace,
    bic,
    collinearity_screen,
    detect_elbow,
    forward_stepwise,
)

# per-station candidates: calendar, time of day, weather, events (+ lags)
STATION_FEATURES = ("month", "day_of_week", "time_of_day", "mean_temperature", "mean_humidity",
                    "mean_visibility", "mean_wind_speed", "precipitation", "events")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# family comparison


@dataclass(frozen=True)
class FamilyFit:
    family: str
    loglik: float
    k_params: int
    bic: float
    flag: str = "ok"


@dataclass
class FamilyComparison:
    fits: list
    preferred: str | None
    models: dict = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(f) for f in self.fits])

    def loglik(self, family: str) -> float:
        return next(f.loglik for f in self.fits if f.family == family)


def compare_families(X, y) -> FamilyComparison:
    """Fit Poisson and NB to the same design and prefer the lower BIC."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyInputError("cannot compare families on zero rows")
    fits, models = [], {}
    for family in ("poisson", "negbin"):
        try:
            m = _quiet(glm.fit, X, y, family=family)
        except BikeCountError as exc:
            fits.append(FamilyFit(family, float("nan"), 0, float("nan"), f"failed: {exc}"))
            continue
        models[family] = m
        fits.append(FamilyFit(family, m.log_likelihood, m.k_params,
                              bic(m.log_likelihood, m.k_params, len(y)),
                              "ok" if m.converged else "nonconverged"))
    ok = [f for f in fits if np.isfinite(f.bic)]
    preferred = min(ok, key=lambda f: f.bic).family if ok else None
    return FamilyComparison(fits, preferred, models)


# ---------------------------------------------------------------------------
# shared selection core


def _drop_constant(design: DesignMatrix) -> tuple[DesignMatrix, list[str]]:
    """Remove predictor columns with no variation (absent levels, single-level blocks)."""
    v = design.values[:, 1:]
    const = np.ptp(v, axis=0) == 0 if len(v) else np.ones(v.shape[1], bool)
    dropped = [c for c, k in zip(design.columns[1:], const) if k]
    kept = [c for c, k in zip(design.columns[1:], const) if not k]
    return design.subset(kept), dropped


@dataclass
class SelectionOutcome:
    ranking: object
    ranked: list
    trace: SelectionTrace
    elbow: Elbow
    chosen: list
    null_bic: float
    oob_mse: float | None


def _rank_and_select(design, y, family, forest_params, max_steps, override, n_jobs,
                     prior_ranking=None):
    forest = fit_forest(design, y, forest_params, n_jobs=n_jobs)
    try:
        oob = oob_error(forest, design, y).mse
    except BikeCountError:
        oob = None
    ranking = permutation_importance(forest, design, y, n_jobs=n_jobs)
    if prior_ranking is None:
        ranked = rank_features(ranking)
    else:
        present = set(design.predictors())
        ranked = [c for c in prior_ranking if c in present]
        ranked += [c for c in rank_features(ranking) if c not in set(ranked)]
    trace = forward_stepwise(ranked, design, y, family, max_steps=max_steps)
    null = _quiet(glm.fit, design.subset([]), y, family=family)
    null_bic = bic(null.log_likelihood, null.k_params, len(y))
    curve = trace.curve()
    if len(curve.k) >= 3:
        elbow = detect_elbow(curve, override)
    else:
        idx = int(np.argmin(curve.bic))
        elbow = Elbow(idx, int(curve.k[idx]), rule="min-BIC (short curve)")
        if override is not None:
            elbow = Elbow(int(np.flatnonzero(curve.k == override)[0]), override, override_used=True)
    trace.elbow = elbow
    chosen = list(trace.chosen)
    # intercept-only wins when no stepwise model beats it
    if not elbow.override_used and null_bic <= curve.bic.min():
        chosen = []
    return SelectionOutcome(ranking, ranked, trace, elbow, chosen, null_bic, oob)


def _histogram(y) -> pd.DataFrame:
    counts = np.bincount(np.asarray(y, dtype=np.int64))
    return pd.DataFrame({"count": np.arange(len(counts)), "frequency": counts})


def _wald_table(model):
    try:
        return glm.wald_inference(model).to_frame(), None
    except InferenceUnavailableError as exc:
        return None, str(exc)


# ---------------------------------------------------------------------------
# network study


@dataclass
class NetworkStudyConfig:
    family: str = "negbin"
    forest: ForestParams = field(default_factory=ForestParams)
    candidates: Sequence[str] | None = None
    collinearity_threshold: float | None = 0.9
    elbow_override: int | None = None
    max_steps: int | None = None
    n_jobs: int = 1
    prior_ranking: Sequence[str] | None = None


@dataclass
class NetworkStudyReport:
    comparison: FamilyComparison
    screen: CollinearityReport
    dropped_constant: list
    outcome: SelectionOutcome
    final: glm.FittedCountModel
    wald: pd.DataFrame | None
    wald_error: str | None
    histogram: pd.DataFrame
    fitted: pd.DataFrame
    n_obs: int
    ranking_source: str = "forest"

    @property
    def chosen(self) -> list:
        return self.outcome.chosen

    def to_dict(self) -> dict:
        return {
            "study": "network",
            "n_obs": self.n_obs,
            "family_comparison": self.comparison.to_frame().to_dict(orient="records"),
            "preferred_family": self.comparison.preferred,
            "collinearity_dropped": [list(d) for d in self.screen.dropped],
            "constant_columns_dropped": self.dropped_constant,
            "oob_mse": self.outcome.oob_mse,
            "ranked": self.outcome.ranked,
            "ranking_source": self.ranking_source,
            "elbow": self.outcome.elbow.to_dict(),
            "null_bic": self.outcome.null_bic,
            "chosen": self.chosen,
            "final_model": self.final.to_dict(),
            "wald": None if self.wald is None else self.wald.to_dict(orient="records"),
            "wald_error": self.wald_error,
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "network_report.json", out / "bic_curve.csv", out / "importance.csv",
                 out / "count_histogram.csv", out / "fitted_vs_observed.csv"]
        dump_json(self.to_dict(), files[0])
        self.outcome.trace.to_csv(files[1])
        self.outcome.ranking.to_csv(files[2])
        self.histogram.to_csv(files[3], index=False)
        self.fitted.to_csv(files[4], index=False, float_format="%.17g")
        return files


def restrict_candidates(design: DesignMatrix, candidates: Sequence[str]) -> DesignMatrix:
    """Keep design columns named in ``candidates`` directly or through their feature block."""
    wanted = set(candidates)
    keep = [c for name, cols in design.blocks.items() for c in cols
            if name in wanted or c in wanted]
    return design.subset([c for c in design.columns[1:] if c in keep])


def run_network_study(table: ObservationTable, config: NetworkStudyConfig = NetworkStudyConfig()
                      ) -> NetworkStudyReport:
    """Pooled model over all stations: family comparison, forest ranking, stepwise BIC, final NB.

    ``config.candidates`` restricts the pass to a curated list of feature
    names (``"station"``, ``"mean_temperature"``) or individual design
    columns (``"station_7"``), and the forest is refit on that list only.
    ``config.prior_ranking`` (typically the ranked list of an earlier full
    pass) fixes the stepwise order instead; columns it does not mention
    follow in the refit forest's order. The importance table is always the
    refit forest's.
    """
    y = table.response
    if len(y) == 0:
        raise EmptyInputError("observation table is empty")
    features = table.feature_names
    if config.collinearity_threshold is not None:
        screen = collinearity_screen(table, config.collinearity_threshold, features)
    else:
        screen = CollinearityReport(list(features), [])
    design = encode(table, screen.retained)
    if config.candidates is not None:
        design = restrict_candidates(design, config.candidates)
    design, dropped = _drop_constant(design)
    try:
        comparison = compare_families(design, y)
    except BikeCountError as exc:
        raise BikeCountError(f"family comparison stage: {exc}") from exc
    try:
        outcome = _rank_and_select(design, y, config.family, config.forest, config.max_steps,
                                   config.elbow_override, config.n_jobs, config.prior_ranking)
    except BikeCountError as exc:
        raise BikeCountError(f"selection stage: {exc}") from exc
    final_design = design.subset(outcome.chosen)
    final = _quiet(glm.fit, final_design, y, family=config.family)
    wald, wald_err = _wald_table(final)
    fitted = pd.DataFrame({"row": np.arange(len(y)), "observed": y,
                           "fitted": glm.predict_mean(final, final_design.values)})
    source = "forest" if config.prior_ranking is None else "prior"
    return NetworkStudyReport(comparison, screen, dropped, outcome, final, wald, wald_err,
                              _histogram(y), fitted, len(y), source)


# ---------------------------------------------------------------------------
# station study


@dataclass
class StationStudyConfig:
    family: str = "negbin"
    split: float = 0.8
    split_mode: str = "random"  # or "contiguous"
    seed: int = 0
    min_rows: int = 50
    forest: ForestParams = field(default_factory=ForestParams)
    elbow_override: int | None = None
    max_steps: int | None = None
    n_jobs: int = 1


@dataclass
class StationStudyReport:
    station_id: int
    skipped: bool = False
    reason: str = ""
    n_train: int = 0
    n_test: int = 0
    train_index: np.ndarray | None = None
    test_index: np.ndarray | None = None
    outcome: SelectionOutcome | None = None
    model: glm.FittedCountModel | None = None
    mpe: float | None = None
    mean_signed_error: float | None = None
    fitted: pd.DataFrame | None = None

    @property
    def chosen(self) -> list:
        return [] if self.outcome is None else self.outcome.chosen

    def to_dict(self) -> dict:
        if self.skipped:
            return {"station_id": self.station_id, "skipped": True, "reason": self.reason}
        return {
            "station_id": self.station_id,
            "skipped": False,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "test_index": self.test_index,
            "ranked": self.outcome.ranked,
            "elbow": self.outcome.elbow.to_dict(),
            "null_bic": self.outcome.null_bic,
            "chosen": self.chosen,
            "model": self.model.to_dict(),
            "mpe": self.mpe,
            "mean_signed_error": self.mean_signed_error,
            "bic_curve": self.outcome.trace.to_frame()[["step", "feature_added", "bic"]]
            .to_dict(orient="records"),
        }


def split_rows(n: int, train_fraction: float, mode: str = "random", seed: int = 0
               ) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted train/test row indices covering 0..n-1."""
    if not 0 < train_fraction < 1:
        raise ValueError("train fraction must be in (0, 1)")
    n_test = int(round(n * (1 - train_fraction)))
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(n)
        test = np.sort(perm[:n_test])
    elif mode == "contiguous":
        test = np.arange(n - n_test, n)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def station_rows(table: ObservationTable, station_id: int) -> ObservationTable:
    if "station" not in table.roles:
        return table
    mask = table.features["station"].to_numpy() == station_id
    return table.subset_rows(np.flatnonzero(mask))


def run_station_study(table: ObservationTable, config: StationStudyConfig = StationStudyConfig(),
                      station_id: int = 1) -> StationStudyReport:
    """Per-station predictive model from gridded rows with lagged counts.

    Ranks the calendar, weather, and lag candidates with the forest on the
    training split, runs stepwise BIC selection, fits the final model on the
    training rows and reports the mean absolute error (MPE) and the mean
    signed error on the held-out rows.
    """
    rows = station_rows(table, station_id)
    if rows.n_rows == 0:
        return StationStudyReport(station_id, skipped=True, reason="station absent from table")
    if rows.n_rows < config.min_rows:
        return StationStudyReport(station_id, skipped=True,
                                  reason=f"{rows.n_rows} rows < minimum {config.min_rows}")
    features = [f for f in rows.feature_names
                if f in STATION_FEATURES or rows.roles[f].group == "lag"]
    train_idx, test_idx = split_rows(rows.n_rows, config.split, config.split_mode, config.seed)
    full = encode(rows, features)
    train_design, _ = _drop_constant(full.rows(train_idx))
    y = rows.response
    y_train, y_test = y[train_idx], y[test_idx]
    try:
        outcome = _rank_and_select(train_design, y_train, config.family, config.forest,
                                   config.max_steps, config.elbow_override, config.n_jobs)
    except BikeCountError as exc:
        return StationStudyReport(station_id, skipped=True, reason=f"selection failed: {exc}")
    final_train = train_design.subset(outcome.chosen)
    model = _quiet(glm.fit, final_train, y_train, family=config.family)
    test_X = full.rows(test_idx).subset(outcome.chosen)
    mu = glm.predict_mean(model, test_X.values)
    err = y_test - mu
    fitted = pd.DataFrame({"station_id": station_id, "row": test_idx, "observed": y_test,
                           "fitted": mu})
    return StationStudyReport(station_id, False, "", len(train_idx), len(test_idx), train_idx,
                              test_idx, outcome, model, float(np.mean(np.abs(err))),
                              float(np.mean(err)), fitted)


def write_station_reports(reports: Sequence[StationStudyReport], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "station_report.json", out / "bic_curve.csv", out / "importance.csv",
             out / "mpe_by_station.csv", out / "fitted_vs_observed.csv"]
    dump_json({"study": "station", "stations": [r.to_dict() for r in reports]}, files[0])
    done = [r for r in reports if not r.skipped]
    curves = [r.outcome.trace.to_frame().assign(station_id=r.station_id) for r in done]
    imps = [r.outcome.ranking.to_frame().assign(station_id=r.station_id) for r in done]
    fits = [r.fitted for r in done]
    _concat(curves, ["station_id", "step", "feature_added", "loglik", "k_params", "bic", "flag"]
            ).to_csv(files[1], index=False, float_format="%.17g")
    _concat(imps, ["station_id", "feature", "raw_mean_increase", "std_across_trees",
                   "normalized_score", "rank"]).to_csv(files[2], index=False, float_format="%.17g")
    pd.DataFrame([{"station_id": r.station_id, "mpe": r.mpe,
                   "mean_signed_error": r.mean_signed_error, "n_train": r.n_train,
                   "n_test": r.n_test, "skipped": r.skipped, "reason": r.reason} for r in reports]
                 ).to_csv(files[3], index=False, float_format="%.17g")
    _concat(fits, ["station_id", "row", "observed", "fitted"]).to_csv(
        files[4], index=False, float_format="%.17g")
    return files


def _concat(frames, columns) -> pd.DataFrame:
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]
