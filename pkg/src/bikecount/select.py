"""Importance-guided forward stepwise selection scored by BIC."""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import glm
from .errors import BikeCountError, SelectionError

ELBOW_RULE = "max-distance-to-chord (normalized)"
ALTERNATE_FRACTION = 0.8


def bic(loglik: float, k_params: int, n: int) -> float:
    """-2 ln L + k ln n."""
    return -2.0 * loglik + k_params * math.log(n)


@dataclass(frozen=True)
class TraceStep:
    step: int
    feature_added: str
    features: tuple
    loglik: float
    k_params: int
    bic: float
    flag: str = "ok"
    theta: float | None = None


@dataclass(frozen=True)
class BicCurve:
    k: np.ndarray
    bic: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k)
        b = np.asarray(self.bic, dtype=float)
        if len(k) != len(b):
            raise ValueError("k and BIC lengths differ")
        if len(k) > 1 and not (np.diff(k) > 0).all():
            raise ValueError("k must be strictly increasing")
        if not np.isfinite(b).all():
            raise ValueError("BIC curve has non-finite values")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "bic", b)


@dataclass(frozen=True)
class Elbow:
    index: int
    k: int
    alternates: tuple = ()
    no_elbow: bool = False
    override_used: bool = False
    rule: str = ELBOW_RULE

    def to_dict(self) -> dict:
        return {"primary_index": self.index, "primary_k": int(self.k),
                "alternates": [int(a) for a in self.alternates], "no_elbow": self.no_elbow,
                "override_used": self.override_used, "rule": self.rule}


@dataclass
class SelectionTrace:
    ranked: list
    n_obs: int
    family: str
    steps: list = field(default_factory=list)
    elbow: Elbow | None = None

    def ok_steps(self) -> list:
        return [s for s in self.steps if s.flag in ("ok", "nonconverged") and np.isfinite(s.bic)]

    def curve(self) -> BicCurve:
        ok = self.ok_steps()
        return BicCurve(np.array([s.step for s in ok]), np.array([s.bic for s in ok]))

    @property
    def chosen(self) -> list:
        if self.elbow is None:
            return []
        return list(self.ranked[: self.elbow.k])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(s.step, s.feature_added, s.loglik, s.k_params, s.bic, s.flag) for s in self.steps],
            columns=["step", "feature_added", "loglik", "k_params", "bic", "flag"],
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def elbow_json(self) -> str:
        return json.dumps(self.elbow.to_dict(), indent=2, sort_keys=True) + "\n"


def _fit_step(design, y, cols, family, warm=None):
    Xk = design.subset(cols)
    kwargs = {}
    if warm is not None:
        beta0, theta0 = warm
        pad = np.zeros(len(cols) + 1)
        pad[: len(beta0)] = beta0
        kwargs["beta0"] = pad
        if family == "negbin" and theta0 is not None:
            kwargs["theta0"] = theta0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return glm.fit(Xk, y, family=family, **kwargs)


def forward_stepwise(ranked: Sequence[str], design, y, family: str = "negbin",
                     max_steps: int | None = None, n_jobs: int = 1,
                     warm_start: bool = True) -> SelectionTrace:
    """Fit the family on the first k ranked columns for k = 1..K and score each by BIC.

    Parameters
    ----------
    ranked : column names in importance order
    design : DesignMatrix containing those columns and the intercept
    y : response counts
    family : "poisson" or "negbin"; NB counts theta in ``k_params``
    max_steps : truncate the path at K steps
    n_jobs : dispatch the K fits to a thread pool (no warm starts then)
    warm_start : reuse step k's coefficients to start step k+1 in serial mode

    A step whose fit raises is recorded with a ``failed`` flag and skipped.
    """
    ranked = list(ranked)
    if not ranked:
        raise SelectionError("no ranked candidates")
    K = len(ranked) if max_steps is None else min(max_steps, len(ranked))
    y = np.asarray(y)
    n = len(y)
    trace = SelectionTrace(ranked=ranked, n_obs=n, family=family)

    def record(k, model, err):
        cols = tuple(ranked[:k])
        if err is not None:
            return TraceStep(k, ranked[k - 1], cols, float("nan"), k + 1 + (family == "negbin"),
                             float("nan"), f"failed: {err}")
        flag = "ok" if model.converged else "nonconverged"
        return TraceStep(k, ranked[k - 1], cols, model.log_likelihood, model.k_params,
                         bic(model.log_likelihood, model.k_params, n), flag, model.theta)

    if n_jobs > 1:
        def job(k):
            try:
                return record(k, _fit_step(design, y, ranked[:k], family), None)
            except (BikeCountError, np.linalg.LinAlgError, FloatingPointError) as exc:
                return record(k, None, exc)
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trace.steps = list(pool.map(job, range(1, K + 1)))
    else:
        warm = None
        for k in range(1, K + 1):
            try:
                model = _fit_step(design, y, ranked[:k], family, warm if warm_start else None)
            except (BikeCountError, np.linalg.LinAlgError, FloatingPointError) as exc:
                trace.steps.append(record(k, None, exc))
                continue
            trace.steps.append(record(k, model, None))
            warm = (model.beta, None if model.theta_at_cap else model.theta)
    if not trace.ok_steps():
        raise SelectionError("every stepwise fit failed")
    return trace


def chord_distances(curve: BicCurve) -> np.ndarray:
    """Perpendicular distance of each point below the first-last chord, both axes mapped to [0, 1].

    Points on or above the chord (worse than linear interpolation) score 0.
    """
    k = curve.k.astype(float)
    b = curve.bic
    ks = (k - k[0]) / (k[-1] - k[0]) if k[-1] != k[0] else np.zeros_like(k)
    span = b.max() - b.min()
    bs = (b - b.min()) / span if span > 0 else np.zeros_like(b)
    x0, y0, x1, y1 = ks[0], bs[0], ks[-1], bs[-1]
    norm = math.hypot(x1 - x0, y1 - y0)
    if norm == 0:
        return np.zeros_like(ks)
    # signed so that points below the chord (lower BIC) are positive
    signed = ((y1 - y0) * ks - (x1 - x0) * bs + x1 * y0 - y1 * x0) / norm
    return np.maximum(signed, 0.0)


def detect_elbow(curve: BicCurve, override: int | None = None) -> Elbow:
    """Pick the stepwise stopping size on a BIC curve.

    The primary elbow maximizes distance to the chord; local maxima at
    least 80% as far from the chord are alternates. The smallest candidate
    size is chosen. ``override`` forces the chosen size (a value of k on the
    curve) and marks the result as overridden.
    """
    if len(curve.k) < 3:
        raise ValueError("elbow detection needs at least 3 points")
    d = chord_distances(curve)
    dmax = d.max()
    if dmax <= 1e-12:
        idx = len(d) - 1
        elbow = Elbow(idx, int(curve.k[idx]), (), no_elbow=True)
    else:
        peaks = [i for i in range(1, len(d) - 1) if d[i] > d[i - 1] and d[i] >= d[i + 1]]
        candidates = sorted(i for i in peaks if d[i] >= ALTERNATE_FRACTION * dmax)
        if not candidates:
            candidates = [int(np.argmax(d))]
        idx = candidates[0]
        alternates = tuple(int(curve.k[i]) for i in candidates[1:])
        elbow = Elbow(idx, int(curve.k[idx]), alternates)
    if override is not None:
        pos = np.flatnonzero(curve.k == override)
        if pos.size == 0:
            raise ValueError(f"override k={override} is not on the curve")
        alts = tuple(sorted({elbow.k, *elbow.alternates} - {override}))
        elbow = Elbow(int(pos[0]), int(override), alts, elbow.no_elbow, override_used=True)
    return elbow


@dataclass(frozen=True)
class CollinearityReport:
    retained: list
    dropped: list  # (kept, dropped, r)


def collinearity_screen(table, threshold: float = 0.9,
                        features: Sequence[str] | None = None) -> CollinearityReport:
    """Drop later-listed continuous features correlated above ``threshold`` with a kept one.

    ``table`` is an ObservationTable (continuous features by role) or a
    DataFrame whose columns are all treated as continuous. Categorical
    features pass through untouched.
    """
    if hasattr(table, "roles"):
        names = table.feature_names if features is None else list(features)
        frame = table.features
        continuous = {n for n in names if table.roles[n].kind == "continuous"}
    else:
        names = list(table.columns) if features is None else list(features)
        frame = table
        continuous = set(names)
    kept_cont: list[str] = []
    retained: list[str] = []
    dropped = []
    for name in names:
        if name not in continuous:
            retained.append(name)
            continue
        x = frame[name].to_numpy(dtype=float)
        hit = None
        for prev in kept_cont:
            xp = frame[prev].to_numpy(dtype=float)
            if x.std() == 0 or xp.std() == 0:
                continue
            r = float(np.corrcoef(xp, x)[0, 1])
            if abs(r) > threshold:
                hit = (prev, name, r)
                break
        if hit is None:
            kept_cont.append(name)
            retained.append(name)
        else:
            dropped.append(hit)
    return CollinearityReport(retained, dropped)
