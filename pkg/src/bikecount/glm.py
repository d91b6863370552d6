"""Poisson and negative binomial (NB2) log-link count regression.

Both families are fitted by iteratively reweighted least squares. The NB
fit alternates IRLS for the coefficients at fixed dispersion with a
one-dimensional profile maximization over the dispersion ``theta``
(variance ``mu + mu**2 / theta``).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

from . import __version__
from .errors import (
    AlignmentError,
    DomainError,
    EmptyInputError,
    EquidispersionWarning,
    InferenceUnavailableError,
    RankDeficiencyError,
)

FAMILIES = ("poisson", "negbin")
THETA_MIN = 1e-4
THETA_MAX = 1e8
ETA_CLIP = 30.0
MAX_ITER = 100
LL_TOL = 1e-8
SCORE_TOL = 1e-6  # multiplied by n
_TABLE_LIMIT = 10_000


# ---------------------------------------------------------------------------
# log-pmfs


def _check_counts(y):
    y = np.asarray(y, dtype=float)
    if (y < 0).any() or (y != np.floor(y)).any():
        raise DomainError("counts must be non-negative integers")
    return y


def poisson_logpmf(y, mu):
    """log[exp(-mu) mu**y / y!]."""
    y = _check_counts(y)
    mu = np.asarray(mu, dtype=float)
    if (mu <= 0).any() or not np.isfinite(mu).all():
        raise DomainError("Poisson mean must be positive and finite")
    out = special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
    return float(out) if out.ndim == 0 else out


def negbin_logpmf(y, mu, theta):
    """NB2 log-pmf with mean ``mu`` and dispersion ``theta``.

    The ratio Gamma(y+theta)/(Gamma(theta) y!) is evaluated as
    ``-betaln(y, theta) - log(y)`` which stays accurate for huge ``theta``
    where a difference of two log-gamma values would lose ~1e-7.
    """
    y = _check_counts(y)
    mu = np.asarray(mu, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if (mu <= 0).any() or not np.isfinite(mu).all():
        raise DomainError("NB mean must be positive and finite")
    if (theta <= 0).any() or not np.isfinite(theta).all():
        raise DomainError("NB dispersion theta must be positive and finite")
    out = _negbin_ll_terms(y, mu, theta)
    return float(out) if out.ndim == 0 else out


def _negbin_ll_terms(y, mu, theta):
    y, mu, theta = np.broadcast_arrays(y, mu, theta)
    pos = y > 0
    yp = np.where(pos, y, 1.0)
    ratio = np.where(pos, -special.betaln(yp, theta) - np.log(yp), 0.0)
    return ratio + special.xlogy(y, mu / (mu + theta)) - theta * np.log1p(mu / theta)


def _digamma_diff(y, theta):
    """psi(y + theta) - psi(theta) and psi'(y + theta) - psi'(theta) for integer y.

    For moderate counts these come from the finite sums sum_{j<y} 1/(theta+j)
    (and its squared version), which stay exact when theta is huge; for very
    large counts the special functions are used directly.
    """
    yi = y.astype(np.int64)
    ymax = int(yi.max()) if yi.size else 0
    if ymax <= _TABLE_LIMIT:
        inv = 1.0 / (theta + np.arange(ymax))
        d1 = np.concatenate([[0.0], np.cumsum(inv)])
        d2 = np.concatenate([[0.0], np.cumsum(inv * inv)])
        return d1[yi], -d2[yi]
    return (special.digamma(y + theta) - special.digamma(theta),
            special.polygamma(1, y + theta) - special.polygamma(1, theta))


def theta_score(y, mu, theta) -> float:
    """d loglik / d theta for NB2 at fixed means."""
    y = np.asarray(y, dtype=float)
    d1, _ = _digamma_diff(y, theta)
    return float(np.sum(d1 - np.log1p(mu / theta) + (mu - y) / (mu + theta)))


def _theta_hessian(y, mu, theta) -> float:
    _, d2 = _digamma_diff(y, theta)
    return float(np.sum(d2 + mu / (theta * (theta + mu)) - (mu - y) / (mu + theta) ** 2))


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class FittedCountModel:
    family: str
    columns: tuple
    beta: np.ndarray
    theta: float | None
    log_likelihood: float
    covariance: np.ndarray
    n_obs: int
    converged: bool
    iterations: int
    theta_at_cap: bool = False
    ridge_used: bool = False

    @property
    def k_params(self) -> int:
        """Estimated parameters: coefficients plus theta for NB."""
        return len(self.beta) + (1 if self.family == "negbin" else 0)

    @property
    def effective_family(self) -> str:
        return "poisson" if self.family == "poisson" or self.theta_at_cap else "negbin"

    def coef(self) -> dict[str, float]:
        return dict(zip(self.columns, self.beta.tolist()))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "columns": list(self.columns),
            "beta": self.beta.tolist(),
            "theta": self.theta,
            "log_likelihood": self.log_likelihood,
            "n_obs": self.n_obs,
            "covariance": self.covariance.ravel().tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "theta_at_cap": self.theta_at_cap,
            "ridge_used": self.ridge_used,
            "version": __version__,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedCountModel":
        p = len(d["beta"])
        return cls(
            family=d["family"],
            columns=tuple(d["columns"]),
            beta=np.asarray(d["beta"], dtype=float),
            theta=None if d.get("theta") is None else float(d["theta"]),
            log_likelihood=float("nan") if d.get("log_likelihood") is None
            else float(d["log_likelihood"]),
            covariance=np.asarray(d["covariance"], dtype=float).reshape(p, p),
            n_obs=int(d["n_obs"]),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            theta_at_cap=bool(d.get("theta_at_cap", False)),
            ridge_used=bool(d.get("ridge_used", False)),
        )

    @classmethod
    def from_json(cls, path) -> "FittedCountModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_coefficients(cls, coefs: Mapping[str, float], family: str = "negbin",
                          theta: float | None = None) -> "FittedCountModel":
        """Wrap published coefficients (first key is the intercept) for prediction only."""
        p = len(coefs)
        return cls(family, tuple(coefs), np.asarray(list(coefs.values()), dtype=float), theta,
                   float("nan"), np.zeros((p, p)), 0, True, 0)


def _as_arrays(X, y=None):
    names = getattr(X, "columns", None)
    values = getattr(X, "values", X)
    if isinstance(X, pd.DataFrame):
        names = list(X.columns)
        values = X.to_numpy()
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise AlignmentError("design must be two-dimensional")
    if names is None:
        names = [f"x{i}" for i in range(values.shape[1])]
    if y is None:
        return values, list(names)
    y = _check_counts(y)
    if len(y) != values.shape[0]:
        raise AlignmentError(f"design has {values.shape[0]} rows but response has {len(y)}")
    return values, list(names), y


def _mean(X, beta):
    return np.exp(np.clip(X @ beta, -ETA_CLIP, ETA_CLIP))


def _ll(y, mu, theta):
    if theta is None:
        return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)))
    return float(np.sum(_negbin_ll_terms(y, mu, theta)))


def _working_weights(mu, theta):
    return mu if theta is None else mu / (1.0 + mu / theta)


def _factor(XtWX):
    """Cholesky factor of the weighted normal matrix, ridged once if needed."""
    p = XtWX.shape[0]

    def attempt(A):
        try:
            c = linalg.cho_factor(A, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            return None
        d = np.abs(np.diag(c[0]))
        if d.min() <= 1e-7 * d.max():
            return None
        return c

    c = attempt(XtWX)
    if c is not None:
        return c, False
    ridge = 1e-10 * np.trace(XtWX) / p
    c = attempt(XtWX + ridge * np.eye(p))
    if c is None:
        raise RankDeficiencyError("weighted normal equations are singular (collinear design?)")
    return c, True


def _irls(X, y, beta, theta, max_iter):
    """Fisher scoring for the log-link coefficients at fixed theta (None = Poisson).

    Returns beta, loglik, iterations, converged flag, ridge flag.
    """
    n = len(y)
    ridge_used = False
    if beta is None:
        mu = (y + y.mean()) / 2.0 + 1e-3
        eta = np.log(mu)
        w = _working_weights(mu, theta)
        z = eta + (y - mu) / mu
        c, r = _factor(X.T @ (w[:, None] * X))
        ridge_used |= r
        beta = linalg.cho_solve(c, X.T @ (w * z))
    mu = _mean(X, beta)
    ll = _ll(y, mu, theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        w = _working_weights(mu, theta)
        z = eta + (y - mu) / mu
        c, r = _factor(X.T @ (w[:, None] * X))
        ridge_used |= r
        new = linalg.cho_solve(c, X.T @ (w * z))
        mu_new = _mean(X, new)
        ll_new = _ll(y, mu_new, theta)
        halvings = 0
        while not ll_new >= ll - 1e-12 * abs(ll) and halvings < 30:
            new = 0.5 * (beta + new)
            mu_new = _mean(X, new)
            ll_new = _ll(y, mu_new, theta)
            halvings += 1
        score = X.T @ (_working_weights(mu_new, theta) * (y - mu_new) / mu_new)
        delta = abs(ll_new - ll)
        beta, mu, ll = new, mu_new, ll_new
        if delta < LL_TOL and np.max(np.abs(score)) < SCORE_TOL * n:
            converged = True
            break
    return beta, ll, it, converged, ridge_used


def _covariance(X, mu, theta):
    w = _working_weights(mu, theta)
    c, _ = _factor(X.T @ (w[:, None] * X))
    cov = linalg.cho_solve(c, np.eye(X.shape[1]))
    return 0.5 * (cov + cov.T)


def _validate(X, y):
    if X.shape[0] == 0:
        raise EmptyInputError("no rows to fit")
    if X.shape[0] < X.shape[1]:
        raise AlignmentError(f"n={X.shape[0]} rows is fewer than p={X.shape[1]} columns")


def fit_poisson(X, y, beta0=None, max_iter: int = MAX_ITER) -> FittedCountModel:
    """Maximum-likelihood Poisson regression with log link.

    Parameters
    ----------
    X : DesignMatrix, DataFrame or 2-D array
        Design including the intercept column.
    y : array of non-negative integer counts
    beta0 : optional warm start

    Non-convergence within ``max_iter`` iterations is reported through
    ``converged=False`` rather than raised.
    """
    X, names, y = _as_arrays(X, y)
    _validate(X, y)
    beta, ll, it, conv, ridge = _irls(X, y, None if beta0 is None else np.asarray(beta0, float),
                                      None, max_iter)
    if not conv:
        warnings.warn(f"Poisson IRLS did not converge in {max_iter} iterations", RuntimeWarning)
    cov = _covariance(X, _mean(X, beta), None)
    return FittedCountModel("poisson", tuple(names), beta, None, ll, cov, len(y), conv, it,
                            ridge_used=ridge)


def _moment_theta(y):
    m = y.mean()
    v = y.var(ddof=1) if len(y) > 1 else 0.0
    return float(np.clip(m * m / max(v - m, 1e-6), THETA_MIN, THETA_MAX))


def profile_theta(y, mu, theta0=None) -> tuple[float, bool]:
    """Maximize the NB log-likelihood over theta with the means held fixed.

    Safeguarded Newton on the theta-score in log(theta), falling back to
    bisection whenever a step leaves the current sign-change bracket.
    Returns ``(theta, at_cap)``.
    """
    y = np.asarray(y, dtype=float)
    if theta_score(y, mu, THETA_MAX) >= 0:
        return THETA_MAX, True
    if theta_score(y, mu, THETA_MIN) <= 0:
        return THETA_MIN, False
    lo, hi = np.log(THETA_MIN), np.log(THETA_MAX)
    u = np.log(theta0) if theta0 is not None else 0.0
    u = float(np.clip(u, lo + 1e-9, hi - 1e-9))
    for _ in range(200):
        t = np.exp(u)
        g = theta_score(y, mu, t)
        if g > 0:
            lo = u
        else:
            hi = u
        if g == 0 or hi - lo < 1e-13:
            break
        dg_du = t * _theta_hessian(y, mu, t)
        u_new = u - g / dg_du if dg_du < 0 else np.nan
        if not (lo < u_new < hi):
            u_new = 0.5 * (lo + hi)
        if abs(u_new - u) < 1e-11:
            u = u_new
            break
        u = u_new
    return float(np.exp(u)), False


def fit_negbin(X, y, beta0=None, theta0=None, max_iter: int = MAX_ITER) -> FittedCountModel:
    """Maximum-likelihood NB2 regression with log link.

    Starts from the Poisson fit (or ``beta0``) with theta from the method of
    moments (or ``theta0``), then alternates coefficient IRLS and the theta
    profile step until the joint log-likelihood changes by less than 1e-8.

    When the dispersion runs into its upper cap, or the Poisson fit is at
    least as likely, the boundary solution is returned: Poisson coefficients,
    ``theta = 1e8``, ``theta_at_cap = True`` and the Poisson log-likelihood
    (the theta -> infinity limit of the family). An
    :class:`EquidispersionWarning` is emitted in that case.
    """
    X, names, y = _as_arrays(X, y)
    _validate(X, y)
    pois = fit_poisson(X, y, beta0=beta0, max_iter=max_iter)
    beta = pois.beta.copy()
    theta = _moment_theta(y) if theta0 is None else float(np.clip(theta0, THETA_MIN, THETA_MAX))
    mu = _mean(X, beta)
    ll = _ll(y, mu, theta)
    ridge = pois.ridge_used
    converged = False
    at_cap = False
    total_it = 0
    for outer in range(1, max_iter + 1):
        beta, _, it, conv_b, r = _irls(X, y, beta, theta, max_iter)
        ridge |= r
        total_it += it
        mu = _mean(X, beta)
        theta, at_cap = profile_theta(y, mu, theta)
        ll_new = _ll(y, mu, theta)
        if at_cap:
            break
        delta = abs(ll_new - ll)
        ll = ll_new
        if delta < LL_TOL and conv_b:
            # one more coefficient pass at the final theta keeps the score tight
            beta, ll, it, conv_b, r = _irls(X, y, beta, theta, max_iter)
            total_it += it
            converged = conv_b
            break
    if at_cap or ll < pois.log_likelihood:
        warnings.warn("NB dispersion at its cap; data look equidispersed, using Poisson limit",
                      EquidispersionWarning)
        return FittedCountModel("negbin", tuple(names), pois.beta, THETA_MAX, pois.log_likelihood,
                                pois.covariance, len(y), pois.converged, pois.iterations + total_it,
                                theta_at_cap=True, ridge_used=pois.ridge_used)
    if not converged:
        warnings.warn(f"NB fit did not converge in {max_iter} outer iterations", RuntimeWarning)
    cov = _covariance(X, _mean(X, beta), theta)
    return FittedCountModel("negbin", tuple(names), beta, theta, ll, cov, len(y), converged,
                            total_it, ridge_used=ridge)


def fit(X, y, family: str = "negbin", **kwargs) -> FittedCountModel:
    if family == "poisson":
        return fit_poisson(X, y, **kwargs)
    if family == "negbin":
        return fit_negbin(X, y, **kwargs)
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


# ---------------------------------------------------------------------------
# evaluation


def score(model_or_family, beta, X, y, theta=None):
    """Analytic gradient of the log-likelihood.

    Returns the coefficient gradient, and for NB a ``(grad_beta, grad_theta)`` pair.
    """
    family = getattr(model_or_family, "family", model_or_family)
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float)
    mu = _mean(X, np.asarray(beta, dtype=float))
    if family == "poisson":
        return X.T @ (y - mu)
    g_beta = X.T @ ((y - mu) * theta / (theta + mu))
    return g_beta, theta_score(y, mu, theta)


def loglik_at(family, beta, X, y, theta=None) -> float:
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = _check_counts(y)
    mu = _mean(X, np.asarray(beta, dtype=float))
    return _ll(y, mu, None if family == "poisson" else theta)


def loglik(model: FittedCountModel, X, y) -> float:
    """Summed log-pmf of ``y`` under the model's parameters; 0 for no rows."""
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        return 0.0
    if X.shape[1] != len(model.beta):
        raise AlignmentError(f"design has {X.shape[1]} columns, model has {len(model.beta)}")
    theta = None if model.effective_family == "poisson" else model.theta
    return loglik_at("poisson" if theta is None else "negbin", model.beta, X, y, theta)


def design_row(columns: Sequence[str], values: Mapping[str, float],
               drop_unknown: bool = False) -> np.ndarray:
    """Build an aligned feature row; absent columns are zero, the intercept is one.

    Names not among ``columns`` raise unless ``drop_unknown`` (used when a
    station dummy is outside a reduced model, which is the same as zeroing it).
    """
    unknown = set(values) - set(columns)
    if unknown and not drop_unknown:
        raise AlignmentError(f"features not in model: {sorted(unknown)}")
    row = np.array([float(values.get(c, 0.0)) for c in columns])
    row[0] = 1.0
    return row


def predict_mean(model: FittedCountModel, x) -> np.ndarray | float:
    """mu = exp(x . beta) for one row or a 2-D block of rows."""
    x = np.asarray(getattr(x, "values", x), dtype=float)
    if x.shape[-1] != len(model.beta):
        raise AlignmentError(f"row has {x.shape[-1]} entries, model has {len(model.beta)} columns")
    mu = np.exp(np.clip(x @ model.beta, -ETA_CLIP, ETA_CLIP))
    return float(mu) if mu.ndim == 0 else mu


@dataclass(frozen=True)
class WaldReport:
    names: tuple
    estimate: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p_value: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "estimate": self.estimate, "std_error": self.se,
                             "z": self.z, "p_value": self.p_value})

    def render(self) -> str:
        lines = [f"{'term':<24}{'estimate':>14}{'std.err':>12}{'z':>10}  p-value"]
        for n, b, s, z, p in zip(self.names, self.estimate, self.se, self.z, self.p_value):
            pv = "< 0.0001" if p < 1e-4 else f"{p:.4f}"
            lines.append(f"{n:<24}{b:>14.6g}{s:>12.4g}{z:>10.3f}  {pv}")
        return "\n".join(lines)


def wald_p_value(z):
    """Two-sided normal p-value, 2 (1 - Phi(|z|))."""
    return 2.0 * stats.norm.sf(np.abs(z))


def wald_inference(model: FittedCountModel) -> WaldReport:
    if not model.converged:
        raise InferenceUnavailableError("model did not converge")
    cov = np.asarray(model.covariance)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InferenceUnavailableError("covariance is not positive definite") from None
    se = np.sqrt(np.diag(cov))
    z = model.beta / se
    return WaldReport(tuple(model.columns), model.beta.copy(), se, z, wald_p_value(z))
