import math

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from bikecount import glm, select
from bikecount.errors import SelectionError
from bikecount.ingest import DesignMatrix
from bikecount.select import BicCurve, bic, chord_distances, detect_elbow, forward_stepwise
from bikecount.synth import gen_counts


def make_design(n, p, beta, family="negbin", seed=0, theta=2.0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
    names = ["intercept"] + [f"f{i}" for i in range(1, p + 1)]
    full = np.zeros(p + 1)
    full[: len(beta)] = beta
    y = gen_counts(X, full, family, theta if family == "negbin" else None, seed=seed + 1)
    return DesignMatrix(X, names, {c: [c] for c in names[1:]}), y


def greedy_oracle(ranked, design, y, family):
    """Independent guided forward loop on statsmodels fits."""
    out = []
    for k in range(1, len(ranked) + 1):
        cols = ["intercept"] + list(ranked[:k])
        X = design.values[:, [design.columns.index(c) for c in cols]]
        if family == "poisson":
            llf = sm.GLM(y, X, family=sm.families.Poisson()).fit(tol=1e-13).llf
            kp = len(cols)
        else:
            llf = sm.NegativeBinomial(y, X, loglike_method="nb2").fit(
                method="newton", maxiter=200, tol=1e-12, disp=0).llf
            kp = len(cols) + 1
        out.append((set(ranked[:k]), llf, -2 * llf + kp * math.log(len(y))))
    return out


class TestBic:
    def test_values(self):
        assert bic(-100, 3, 1000) == pytest.approx(220.7233, abs=1e-4)
        assert bic(0, 1, 1) == 0
        assert bic(-5.61e6, 95, 1e6) == pytest.approx(1.122e7, rel=1e-3)


class TestStepwise:
    def test_feature_sets(self):
        d, y = make_design(400, 3, [1.0, 0.3, 0.2])
        tr = forward_stepwise(["f1", "f2", "f3"], d, y)
        assert [set(s.features) for s in tr.steps] == [{"f1"}, {"f1", "f2"}, {"f1", "f2", "f3"}]
        assert [s.feature_added for s in tr.steps] == ["f1", "f2", "f3"]

    @pytest.mark.parametrize("family", ["poisson", "negbin"])
    def test_matches_greedy_oracle(self, family):
        d, y = make_design(800, 5, [1.0, 0.4, -0.3, 0.2], family, seed=3)
        ranked = ["f3", "f1", "f5", "f2", "f4"]
        tr = forward_stepwise(ranked, d, y, family)
        for step, (cols, llf, b) in zip(tr.steps, greedy_oracle(ranked, d, y, family)):
            assert set(step.features) == cols
            assert step.loglik == pytest.approx(llf, abs=1e-6)
            assert step.bic == pytest.approx(b, abs=2e-6)

    def test_bic_identity_exact(self):
        d, y = make_design(500, 4, [1.0, 0.3])
        tr = forward_stepwise(["f1", "f2", "f3", "f4"], d, y)
        for s in tr.steps:
            assert s.bic - (-2.0 * s.loglik + s.k_params * math.log(tr.n_obs)) == 0.0
            assert s.k_params == len(s.features) + 2

    def test_nested_monotone(self):
        d, y = make_design(600, 5, [1.0, 0.2, 0.1], seed=8)
        tr = forward_stepwise([f"f{i}" for i in range(1, 6)], d, y)
        ll = [s.loglik for s in tr.steps]
        assert all(b >= a - 1e-6 for a, b in zip(ll, ll[1:]))

    def test_parallel_matches_serial(self):
        d, y = make_design(500, 4, [1.0, 0.3, 0.2], seed=2)
        ranked = ["f2", "f1", "f4", "f3"]
        a = forward_stepwise(ranked, d, y, n_jobs=1, warm_start=False)
        b = forward_stepwise(ranked, d, y, n_jobs=3)
        assert [s.loglik for s in a.steps] == [s.loglik for s in b.steps]

    def test_failed_step_flagged(self, monkeypatch):
        d, y = make_design(300, 3, [1.0, 0.3])
        real = select._fit_step

        def flaky(design, y, cols, family, warm=None):
            if len(cols) == 2:
                raise glm.RankDeficiencyError("forced")
            return real(design, y, cols, family, warm)

        monkeypatch.setattr(select, "_fit_step", flaky)
        tr = forward_stepwise(["f1", "f2", "f3"], d, y)
        assert tr.steps[1].flag.startswith("failed")
        assert list(tr.curve().k) == [1, 3]

    def test_all_failed(self, monkeypatch):
        d, y = make_design(100, 2, [1.0])

        def boom(*a, **k):
            raise glm.RankDeficiencyError("forced")

        monkeypatch.setattr(select, "_fit_step", boom)
        with pytest.raises(SelectionError):
            forward_stepwise(["f1", "f2"], d, y)

    def test_empty_ranking(self):
        d, y = make_design(100, 1, [1.0])
        with pytest.raises(SelectionError):
            forward_stepwise([], d, y)

    def test_noise_feature_raises_bic(self):
        rises = 0
        for seed in range(100):
            d, y = make_design(1000, 2, [1.0, 0.3], "poisson", seed=seed)
            tr = forward_stepwise(["f1", "f2"], d, y, "poisson")
            rises += tr.steps[1].bic > tr.steps[0].bic
        assert rises >= 95

    def test_trace_csv(self, tmp_path):
        d, y = make_design(200, 2, [1.0, 0.3])
        tr = forward_stepwise(["f1", "f2"], d, y)
        tr.to_csv(tmp_path / "t.csv")
        assert list(pd.read_csv(tmp_path / "t.csv").columns) == [
            "step", "feature_added", "loglik", "k_params", "bic", "flag"]


class TestElbow:
    def test_hand_example(self):
        e = detect_elbow(BicCurve(np.arange(1, 6), np.array([100, 50, 48, 47.5, 47.4])))
        assert e.k == 2 and not e.no_elbow

    def test_hand_distances(self):
        # normalized points (0,1),(.25,.0765),(.5,.0235),(.75,.0044),(1,0); chord x + y = 1
        d = chord_distances(BicCurve(np.arange(1, 6), np.array([100, 50, 48, 47.5, 47.4])))
        b = (np.array([100, 50, 48, 47.5, 47.4]) - 47.4) / 52.6
        x = np.linspace(0, 1, 5)
        np.testing.assert_allclose(d, np.abs(x + b - 1) / math.sqrt(2), atol=1e-15)

    def test_linear_no_elbow(self):
        e = detect_elbow(BicCurve(np.arange(1, 8), 100 - 3.0 * np.arange(7)))
        assert e.no_elbow and e.index == 6

    def test_two_knees(self):
        # drop to k=11, plateau, second drop to k=51, then a rising noise tail
        k = np.arange(1, 61)
        b = np.interp(k, [1, 11, 45, 51, 60], [1000, 700, 680, 300, 420])
        curve = BicCurve(k, b)
        d = chord_distances(curve)
        assert d[50] > d[10] >= 0.8 * d[50]
        e = detect_elbow(curve)
        assert e.k == 11 and e.alternates == (51,)

    def test_points_above_chord_ignored(self):
        d = chord_distances(BicCurve(np.arange(1, 5), np.array([10.0, 12.0, 11.0, 0.0])))
        assert d[1] == 0 and d[2] == 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30),
           st.floats(1e-3, 1e3), st.floats(-1e6, 1e6))
    def test_affine_invariance(self, values, a, b):
        v = np.array(values)
        if np.ptp(v) < 1e-3:
            return
        k = np.arange(1, len(v) + 1)
        e1 = detect_elbow(BicCurve(k, v))
        e2 = detect_elbow(BicCurve(k, a * v + b))
        if not (e1.no_elbow or e2.no_elbow):
            d = chord_distances(BicCurve(k, v))
            # the argmax is unchanged up to floating-point ties
            assert e1.k == e2.k or abs(d[e1.index] - d[e2.index]) < 1e-9

    def test_override(self):
        e = detect_elbow(BicCurve(np.arange(1, 6), np.array([100, 50, 48, 47.5, 47.4])), override=4)
        assert e.k == 4 and e.override_used and 2 in e.alternates
        with pytest.raises(ValueError):
            detect_elbow(BicCurve(np.arange(1, 6), np.arange(5.0)), override=9)

    def test_short_curve(self):
        with pytest.raises(ValueError):
            detect_elbow(BicCurve(np.arange(1, 3), np.array([2.0, 1.0])))

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            BicCurve(np.array([1, 1, 2]), np.zeros(3))
        with pytest.raises(ValueError):
            BicCurve(np.array([1, 2]), np.array([1.0, np.nan]))


class TestCollinearity:
    def test_temperature_triple(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(60, 8, 500)
        df = pd.DataFrame({"mean_t": mean, "max_t": mean + rng.normal(8, 1, 500),
                           "min_t": mean - rng.normal(8, 1, 500)})
        rep = select.collinearity_screen(df)
        assert rep.retained == ["mean_t"]
        assert [d[1] for d in rep.dropped] == ["max_t", "min_t"]
        assert all(abs(d[2]) > 0.9 for d in rep.dropped)

    def test_independent(self):
        rng = np.random.default_rng(1)
        df = pd.DataFrame(rng.standard_normal((500, 4)), columns=list("abcd"))
        assert select.collinearity_screen(df).dropped == []

    def test_exact_duplicate(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(100)
        rep = select.collinearity_screen(pd.DataFrame({"a": x, "b": x}))
        assert rep.retained == ["a"] and rep.dropped[0][2] == pytest.approx(1.0)
