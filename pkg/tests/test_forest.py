import numpy as np
import pandas as pd
import pytest

from bikecount.errors import ForestSizeError, OOBUndefinedError
from bikecount.forest import (
    ForestParams,
    ImportanceRanking,
    fit_forest,
    oob_error,
    permutation_importance,
    rank_features,
    training_mse,
)


def linear_data(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    y = 3 * X[:, 0] + rng.standard_normal(n)
    return X, y


class TestFit:
    def test_deep_tree_interpolates_inbag(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((200, 1))
        f = fit_forest(x, x[:, 0], ForestParams(n_trees=1, min_leaf_size=1, seed=3))
        inbag = f.inbag[0] > 0
        np.testing.assert_allclose(f.trees[0].predict(x)[inbag], x[inbag, 0])

    def test_determinism(self):
        X, y = linear_data(300)
        a = fit_forest(X, y, ForestParams(n_trees=10, seed=42))
        b = fit_forest(X, y, ForestParams(n_trees=10, seed=42))
        for ta, tb in zip(a.trees, b.trees):
            for name in ("feature", "threshold", "left", "right", "value"):
                np.testing.assert_array_equal(getattr(ta, name), getattr(tb, name))
        np.testing.assert_array_equal(a.inbag, b.inbag)

    def test_bootstrap_multiset_and_oob_fraction(self):
        X, y = linear_data(500)
        f = fit_forest(X, y, ForestParams(n_trees=30, seed=5))
        assert (f.inbag.sum(axis=1) == 500).all()
        frac = (f.inbag == 0).mean(axis=1)
        assert ((frac >= 0.30) & (frac <= 0.43)).all()
        for t in range(f.n_trees):
            np.testing.assert_array_equal(f.oob_rows(t), np.flatnonzero(f.inbag[t] == 0))

    def test_splits_reduce_variance(self):
        X, y = linear_data(400)
        f = fit_forest(X, y, ForestParams(n_trees=5, seed=1))
        for tree in f.trees:
            internal = tree.feature >= 0
            assert (tree.improvement[internal] > 0).all()
            assert (tree.count[tree.left[internal]] >= 5).all()
            assert (tree.count[tree.right[internal]] >= 5).all()

    def test_predictions_within_range(self):
        X, y = linear_data(300, seed=2)
        pred = fit_forest(X, y, ForestParams(n_trees=20, seed=2)).predict(X)
        assert pred.min() >= y.min() and pred.max() <= y.max()

    def test_constant_response(self):
        X, _ = linear_data(100)
        f = fit_forest(X, np.full(100, 4.0), ForestParams(n_trees=5))
        assert f.constant_response
        assert all(t.n_leaves == 1 for t in f.trees)
        assert oob_error(f, X, np.full(100, 4.0)).mse == 0.0

    def test_size_error(self):
        with pytest.raises(ForestSizeError):
            fit_forest(np.zeros((9, 1)), np.zeros(9), ForestParams(min_leaf_size=5))

    def test_mtry_bounds(self):
        with pytest.raises(ValueError):
            fit_forest(np.zeros((20, 2)), np.zeros(20), ForestParams(features_per_split=3))

    def test_max_depth(self):
        X, y = linear_data(300)
        f = fit_forest(X, y, ForestParams(n_trees=3, max_depth=1))
        assert all(t.n_leaves <= 2 for t in f.trees)

    def test_dataframe_names(self):
        X, y = linear_data(100)
        f = fit_forest(pd.DataFrame(X, columns=["a", "b"]), y, ForestParams(n_trees=2))
        assert f.feature_names == ("a", "b")


class TestOOB:
    @pytest.mark.parametrize("seed", range(5))
    def test_noise_floor(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((400, 3))
        y = rng.standard_normal(400)
        f = fit_forest(X, y, ForestParams(n_trees=50, seed=seed))
        assert 0.8 <= oob_error(f, X, y).mse <= 1.4

    @pytest.mark.parametrize("seed", range(5))
    def test_optimism(self, seed):
        X, y = linear_data(300, seed)
        f = fit_forest(X, y, ForestParams(n_trees=30, seed=seed))
        assert oob_error(f, X, y).mse >= training_mse(f, X, y)

    def test_exclusions_counted(self):
        X, y = linear_data(30)
        err = oob_error(fit_forest(X, y, ForestParams(n_trees=1, seed=0)), X, y)
        assert err.n_included + err.n_excluded == 30 and err.n_excluded > 0

    def test_undefined(self):
        X, y = linear_data(30)
        f = fit_forest(X, y, ForestParams(n_trees=1))
        object.__setattr__(f, "inbag", np.ones_like(f.inbag))
        with pytest.raises(OOBUndefinedError):
            oob_error(f, X, y)


class TestImportance:
    def test_informative_beats_noise(self):
        wins = 0
        for seed in range(20):
            X, y = linear_data(1000, seed)
            f = fit_forest(X, y, ForestParams(n_trees=30, seed=seed))
            wins += rank_features(permutation_importance(f, X, y))[0] == "x0"
        assert wins >= 19

    def test_constant_feature_zero(self):
        X, y = linear_data(300)
        X = np.column_stack([X, np.full(300, 2.0)])
        r = permutation_importance(fit_forest(X, y, ForestParams(n_trees=20)), X, y)
        assert r.raw_mean[2] == 0.0 and r.normalized[2] == 0.0

    def test_duplicate_shares_credit(self):
        X, y = linear_data(600, 4)
        X = np.column_stack([X, X[:, 0]])
        r = permutation_importance(fit_forest(X, y, ForestParams(n_trees=40, seed=4)), X, y)
        assert r.raw_mean[0] > 0 and r.raw_mean[2] > 0

    def test_serial_parallel_identical(self):
        X, y = linear_data(400, 6)
        params = ForestParams(n_trees=16, seed=9)
        fa, fb = fit_forest(X, y, params), fit_forest(X, y, params, n_jobs=4)
        ra = permutation_importance(fa, X, y)
        rb = permutation_importance(fb, X, y, n_jobs=4)
        np.testing.assert_array_equal(ra.raw_mean, rb.raw_mean)
        np.testing.assert_array_equal(ra.normalized, rb.normalized)

    def test_csv_columns(self, tmp_path):
        X, y = linear_data(200)
        r = permutation_importance(fit_forest(X, y, ForestParams(n_trees=5)), X, y)
        r.to_csv(tmp_path / "imp.csv")
        frame = pd.read_csv(tmp_path / "imp.csv")
        assert list(frame.columns) == ["feature", "raw_mean_increase", "std_across_trees",
                                       "normalized_score", "rank"]
        assert frame["rank"].tolist() == [1, 2]


class TestRank:
    def _ranking(self, scores):
        names = tuple(scores)
        vals = np.array(list(scores.values()), dtype=float)
        return ImportanceRanking(names, vals, np.zeros(len(vals)), vals, 1)

    def test_sort(self):
        assert rank_features(self._ranking({"a": 2.0, "b": 0.5, "c": 1.0})) == ["a", "c", "b"]

    def test_ties_keep_column_order(self):
        assert rank_features(self._ranking({"b": 0.0, "a": 0.0, "c": 0.0})) == ["b", "a", "c"]

    def test_sigma_zero_reports_raw_mean(self):
        X = np.column_stack([np.arange(40.0), np.zeros(40)])
        y = np.arange(40.0)
        r = permutation_importance(fit_forest(X, y, ForestParams(n_trees=1)), X, y)
        assert r.std[0] == 0 and r.normalized[0] == r.raw_mean[0] > 0
