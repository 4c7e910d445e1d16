import numpy as np
import pytest

from oracles import oracle_boost, tree_signature
from vidpop.errors import EmptyData, EmptySpace, NonFiniteTarget, TooFewRows, UnknownFeature
from vidpop.features import FeatureMatrix
from vidpop.gbdt import (
    GbdtParams,
    TreeEnsemble,
    cross_validate,
    feature_importance,
    fit_gbdt,
    load_gbdt,
    predict_gbdt,
    save_gbdt,
    tune_gbdt,
)

EXACT = dict(subsample_rows=1.0, colsample=1.0, seed=0)


def _sig(node):
    out = []

    def walk(nd):
        if nd.is_leaf:
            out.append(("leaf", nd.weight))
        else:
            out.append((nd.feature, nd.threshold))
            walk(nd.left)
            walk(nd.right)

    walk(node)
    return out


def two_row_model():
    X = np.array([[0.0], [1.0]])
    y = np.array([0.0, 1.0])
    params = GbdtParams(n_rounds=1, max_depth=1, reg_lambda=0.0, gamma=0.0, learning_rate=1.0, **EXACT)
    return fit_gbdt(X, y, params), X, y


class TestFit:
    def test_two_row_closed_form(self):
        model, X, y = two_row_model()
        assert model.base_score == 0.5
        tree = model.trees[0]
        assert tree.feature == 0 and tree.threshold == 0.5
        assert tree.left.weight == -0.5 and tree.right.weight == 0.5
        assert tree.gain == 0.25
        assert predict_gbdt(model, X).tolist() == [0.0, 1.0]

    @pytest.mark.parametrize("gamma", [0.0, 0.5])
    def test_constant_target_never_splits(self, gamma):
        X = np.arange(8.0).reshape(-1, 1)
        y = np.full(8, 3.25)
        params = GbdtParams(n_rounds=5, max_depth=4, gamma=gamma, **EXACT)
        model = fit_gbdt(X, y, params)
        assert all(t.is_leaf for t in model.trees)
        assert predict_gbdt(model, X).tolist() == [3.25] * 8

    def test_oracle_equivalence_sample(self):
        for seed in range(30):
            rng = np.random.default_rng(500 + seed)
            n = int(rng.integers(4, 33))
            X = rng.normal(size=(n, int(rng.integers(1, 4))))
            y = rng.normal(size=n)
            depth = int(rng.integers(1, 3))
            rounds = int(rng.integers(1, 4))
            lam = float(rng.choice([0.0, 1.0]))
            params = GbdtParams(
                n_rounds=rounds, max_depth=depth, reg_lambda=lam, gamma=0.0,
                learning_rate=0.5, **EXACT,
            )
            model = fit_gbdt(X, y, params)
            base, trees, pred = oracle_boost(X, y, rounds, depth, lam, 0.0, 0.5)
            assert model.base_score == base
            for tl, to in zip(model.trees, trees):
                assert _sig(tl) == tree_signature(to)
            assert np.max(np.abs(predict_gbdt(model, X) - pred)) < 1e-12

    def test_monotone_training_loss(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(80, 4))
        y = X[:, 0] * 2 - X[:, 1] + 0.3 * rng.normal(size=80)
        params = GbdtParams(n_rounds=40, max_depth=3, learning_rate=0.2, **EXACT)
        model = fit_gbdt(X, y, params)
        losses = [
            float(np.mean((predict_gbdt(model, X, num_trees=k) - y) ** 2))
            for k in range(params.n_rounds + 1)
        ]
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    def test_constant_shift_moves_predictions_by_c(self):
        # base-score absorbs the shift; split structure must be unchanged and
        # predictions move by c up to float round-off (addition order differs)
        def structure(node):
            out = []

            def walk(nd):
                if not nd.is_leaf:
                    out.append((nd.feature, nd.threshold))
                    walk(nd.left)
                    walk(nd.right)

            walk(node)
            return out

        rng = np.random.default_rng(21)
        X = rng.normal(size=(16, 3))
        y = rng.integers(0, 512, size=16).astype(np.float64)
        c = 1024.0
        params = GbdtParams(n_rounds=6, max_depth=2, learning_rate=0.5, **EXACT)
        m1 = fit_gbdt(X, y, params)
        m2 = fit_gbdt(X, y + c, params)
        assert m2.base_score == m1.base_score + c
        assert [structure(t) for t in m1.trees] == [structure(t) for t in m2.trees]
        assert np.allclose(predict_gbdt(m2, X), predict_gbdt(m1, X) + c, rtol=0, atol=1e-9)

    def test_depth_limit_respected(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(64, 3))
        y = rng.normal(size=64)
        model = fit_gbdt(X, y, GbdtParams(n_rounds=2, max_depth=2, **EXACT))

        def depth(node):
            return 0 if node.is_leaf else 1 + max(depth(node.left), depth(node.right))

        assert all(depth(t) <= 2 for t in model.trees)

    def test_errors(self):
        with pytest.raises(EmptyData):
            fit_gbdt(np.zeros((1, 2)), np.zeros(1), GbdtParams(**EXACT))
        with pytest.raises(NonFiniteTarget):
            fit_gbdt(np.zeros((4, 2)), np.array([1.0, np.nan, 0.0, 2.0]), GbdtParams(**EXACT))


class TestPredict:
    def test_empty_ensemble_returns_base(self):
        model = TreeEnsemble(params=GbdtParams(**EXACT), base_score=2.5, trees=[], feature_names=["f0"])
        assert predict_gbdt(model, np.zeros((3, 1))).tolist() == [2.5, 2.5, 2.5]

    def test_deterministic(self):
        model, X, _ = two_row_model()
        a = predict_gbdt(model, X)
        b = predict_gbdt(model, X)
        assert np.array_equal(a, b)

    def test_unknown_feature(self):
        model, _, _ = two_row_model()
        fm = FeatureMatrix(names=["other"], values=np.zeros((2, 1)), row_ids=["a", "b"])
        with pytest.raises(UnknownFeature):
            predict_gbdt(model, fm)

    def test_feature_matrix_by_name(self):
        model, X, _ = two_row_model()
        fm = FeatureMatrix(
            names=["extra", "f0"],
            values=np.column_stack([np.ones(2), X[:, 0]]),
            row_ids=["a", "b"],
        )
        assert predict_gbdt(model, fm).tolist() == [0.0, 1.0]


class TestImportance:
    def test_two_row_example(self):
        model, _, _ = two_row_model()
        report = feature_importance(model)
        assert report.gains == {"f0": 0.25}
        assert report.split_counts == {"f0": 1}

    def test_empty_ensemble_all_zero(self):
        model = TreeEnsemble(
            params=GbdtParams(**EXACT), base_score=0.0, trees=[], feature_names=["a", "b"]
        )
        report = feature_importance(model)
        assert report.gains == {"a": 0.0, "b": 0.0}

    def test_informative_column_dominates(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(200, 4))
        y = 5.0 * X[:, 2]
        model = fit_gbdt(X, y, GbdtParams(n_rounds=30, max_depth=3, learning_rate=0.3, **EXACT))
        report = feature_importance(model)
        assert max(report.gains, key=report.gains.get) == "f2"

    def test_totals_equal_recorded_gains(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        model = fit_gbdt(X, y, GbdtParams(n_rounds=5, max_depth=3, **EXACT))
        report = feature_importance(model)

        total = 0.0
        stack = list(model.trees)
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                total += node.gain
                stack.extend([node.left, node.right])
        assert sum(report.gains.values()) == pytest.approx(total, rel=1e-15)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 5))
        y = rng.normal(size=60)
        model = fit_gbdt(X, y, GbdtParams(n_rounds=10, max_depth=4, seed=3,
                                          subsample_rows=0.8, colsample=0.8))
        path = tmp_path / "m.json"
        save_gbdt(model, path)
        back = load_gbdt(path)
        assert np.array_equal(predict_gbdt(back, X), predict_gbdt(model, X))
        assert back.feature_names == model.feature_names
        assert back.params == model.params


class TestCrossValidate:
    def test_constant_target_zero_mape(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 2))
        y = np.full(40, np.log1p(5.0))
        out = cross_validate(X, y, GbdtParams(n_rounds=3, max_depth=2, **EXACT), n_folds=5, seed=1)
        assert out["mape_mean"] == 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(50, 3))
        y = np.log1p(np.abs(rng.normal(size=50)) * 10)
        params = GbdtParams(n_rounds=5, max_depth=2, seed=4, subsample_rows=0.9, colsample=0.9)
        a = cross_validate(X, y, params, n_folds=5, seed=9)
        b = cross_validate(X, y, params, n_folds=5, seed=9)
        assert a == b

    def test_ten_folds_on_synthetic(self, small_bundle):
        from vidpop.features import assemble_feature_matrix, fit_median_stats, fit_tag_frequency, train_time_range

        stats = fit_median_stats(small_bundle.train)
        freq = fit_tag_frequency([r.caption for r in small_bundle.train.rows])
        fm = assemble_feature_matrix(small_bundle.train, stats, freq, train_time_range(small_bundle.train))
        y = np.log1p(small_bundle.train.target_vector("play"))
        out = cross_validate(fm, y, GbdtParams(seed=1), n_folds=10, seed=7)
        assert len(out["folds"]) == 10
        assert all(np.isfinite(f["mape"]) and np.isfinite(f["mse"]) for f in out["folds"])

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            cross_validate(np.zeros((3, 1)), np.zeros(3), GbdtParams(**EXACT), n_folds=5, seed=0)


class TestTune:
    def _data(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(40, 3))
        y = np.log1p(np.abs(X[:, 0] * 3) + 1.0)
        return X, y

    def test_budget_one_returns_single_draw(self):
        X, y = self._data()
        result = tune_gbdt(X, y, {"max_depth": [2, 4]}, budget=1, seed=3, n_folds=4)
        assert len(result.trials) == 1
        assert result.best.max_depth == result.trials[0]["params"]["max_depth"]

    def test_fixed_point_space(self):
        X, y = self._data()
        result = tune_gbdt(
            X, y, {"max_depth": 3, "learning_rate": [0.1, 0.1]}, budget=4, seed=3, n_folds=4
        )
        assert result.best.max_depth == 3
        assert result.best.learning_rate == 0.1

    def test_argmin_over_trial_log(self):
        X, y = self._data()
        result = tune_gbdt(
            X,
            y,
            {"max_depth": [1, 4], "learning_rate": [0.05, 0.5], "n_rounds": [5, 30]},
            budget=8,
            seed=7,
            n_folds=4,
        )
        best_score = min(t["mape_mean"] for t in result.trials)
        got = cross_validate(X, y, result.best, n_folds=4, seed=7)["mape_mean"]
        assert got == best_score
        first_best = next(t for t in result.trials if t["mape_mean"] == best_score)
        assert result.best.__dict__ == first_best["params"]

    def test_empty_space(self):
        X, y = self._data()
        with pytest.raises(EmptySpace):
            tune_gbdt(X, y, {}, budget=2, seed=0)
        with pytest.raises(EmptySpace):
            tune_gbdt(X, y, {"max_depth": [1, 3]}, budget=0, seed=0)
