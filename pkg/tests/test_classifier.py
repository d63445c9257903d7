"""Encoding and logistic-regression tests, gradient-checked against central
finite differences (the independent oracle for the analytic gradient)."""

from __future__ import annotations

import numpy as np
import pytest

from featforge.metrics import (
    DegenerateLabels,
    TooFewPerClass,
    cross_validated_f1,
    encode,
    logreg_gradient,
    logreg_loss,
    macro_f1_from_confusion,
    predict_proba,
    train_logreg,
)
from featforge.model import FeatureValue

from conftest import bool_feat, build_matrix, cat_feat, real_feat

B = FeatureValue.boolean
R = FeatureValue.real
C = FeatureValue.categorical
M = FeatureValue.missing


class TestEncode:
    def test_boolean_encoding_and_imputation(self):
        m = build_matrix(
            [bool_feat("flag")],
            [
                ("a", "x", [B(True)]),
                ("b", "y", [B(False)]),
                ("c", "x", [M("parse-failed")]),
            ],
        )
        enc = encode(m)
        np.testing.assert_allclose(enc.X[:, 0], [1.0, 0.0, 0.5])  # mean of observed
        np.testing.assert_allclose(enc.X[:, 1], [0.0, 0.0, 1.0])  # missing indicator
        assert [c.role for c in enc.columns] == ["numeric", "missing_indicator"]

    def test_categorical_one_hot_sums_to_one(self):
        m = build_matrix(
            [cat_feat("tone", ("a", "b"))],
            [
                ("r1", "x", [C("a")]),
                ("r2", "y", [C("b")]),
                ("r3", "x", [M("out-of-vocabulary")]),
            ],
        )
        enc = encode(m)
        assert enc.X.shape[1] == 3  # a, b, MISSING
        np.testing.assert_allclose(enc.X.sum(axis=1), 1.0)
        np.testing.assert_allclose(enc.X[2], [0.0, 0.0, 1.0])

    def test_all_missing_real_is_zero_column_with_indicator(self):
        m = build_matrix(
            [real_feat("score")],
            [("a", "x", [M("extraction-refused")]), ("b", "y", [M("extraction-refused")])],
        )
        enc = encode(m)
        np.testing.assert_allclose(enc.X[:, 0], 0.0)
        np.testing.assert_allclose(enc.X[:, 1], 1.0)

    def test_real_standardized_on_fit_stats(self):
        m = build_matrix(
            [real_feat("score")],
            [("a", "x", [R(1.0)]), ("b", "y", [R(3.0)])],
        )
        enc = encode(m)
        np.testing.assert_allclose(enc.X[:, 0], [-1.0, 1.0])
        # transform mode reuses the fitted stats verbatim
        m2 = build_matrix([real_feat("score")], [("c", "x", [R(5.0)])])
        enc2 = encode(m2, fit_stats=enc.stats)
        np.testing.assert_allclose(enc2.X[:, 0], [3.0])

    def test_single_class_fit_raises(self):
        m = build_matrix(
            [bool_feat("flag")], [("a", "x", [B(True)]), ("b", "x", [B(False)])]
        )
        with pytest.raises(DegenerateLabels):
            encode(m)

    def test_zero_variance_column_is_all_zeros(self):
        m = build_matrix(
            [real_feat("score")],
            [("a", "x", [R(2.0)]), ("b", "y", [R(2.0)])],
        )
        enc = encode(m)
        np.testing.assert_allclose(enc.X[:, 0], 0.0)


def _random_problem(rng, n=5, p=4, n_classes=3):
    X = rng.normal(size=(n, p))
    y = rng.integers(0, n_classes, size=n)
    # make sure every class appears at least once
    y[:n_classes] = np.arange(n_classes)
    W = rng.normal(scale=0.8, size=(n_classes, p))
    b = rng.normal(scale=0.5, size=n_classes)
    return X, y, W, b


def _numerical_gradient(X, y, W, b, l2, eps=1e-6):
    gW = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        gW[idx] = (logreg_loss(X, y, Wp, b, l2) - logreg_loss(X, y, Wm, b, l2)) / (2 * eps)
    gb = np.zeros_like(b)
    for i in range(b.size):
        bp, bm = b.copy(), b.copy()
        bp[i] += eps
        bm[i] -= eps
        gb[i] = (logreg_loss(X, y, W, bp, l2) - logreg_loss(X, y, W, bm, l2)) / (2 * eps)
    return gW, gb


class TestTrainLogreg:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            X, y, W, b = _random_problem(rng)
            gW, gb = logreg_gradient(X, y, W, b, l2=0.3)
            nW, nb = _numerical_gradient(X, y, W, b, l2=0.3)
            scale = max(np.abs(nW).max(), np.abs(nb).max(), 1e-12)
            assert np.abs(gW - nW).max() / scale < 1e-5
            assert np.abs(gb - nb).max() / scale < 1e-5

    def test_separable_toy_reaches_perfect_accuracy(self):
        m = build_matrix(
            [real_feat("x")],
            [(f"r{i}", "A" if v < 0 else "B", [R(v)]) for i, v in enumerate([-3, -2, -1, 1, 2, 3])],
        )
        enc = encode(m)
        model = train_logreg(enc, l2=1.0)
        preds = predict_proba(model, enc.X).argmax(axis=1)
        assert (preds == enc.y).all()

    def test_identical_rows_predict_class_priors(self):
        rows = [(f"r{i}", ["A", "B"][i % 2], [R(1.0)]) for i in range(10)]
        enc = encode(build_matrix([real_feat("x")], rows))
        model = train_logreg(enc, l2=1.0)
        proba = predict_proba(model, enc.X)
        np.testing.assert_allclose(proba, 0.5, atol=1e-6)

    def test_loss_history_non_increasing(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            X, y, _, _ = _random_problem(rng, n=30, p=6)
            m = build_matrix(
                [real_feat(f"f{j}") for j in range(6)],
                [
                    (f"r{i}", f"c{y[i]}", [R(float(X[i, j])) for j in range(6)])
                    for i in range(30)
                ],
            )
            model = train_logreg(encode(m), l2=0.5)
            hist = np.array(model.loss_history)
            assert (np.diff(hist) <= 0).all()

    def test_converges_on_easy_problem(self):
        m = build_matrix(
            [real_feat("x")],
            [(f"r{i}", "A" if i % 2 else "B", [R(float(i % 2) + 0.1 * i)]) for i in range(12)],
        )
        model = train_logreg(encode(m), l2=1.0, tol=1e-6, max_iter=2000)
        assert model.converged
        assert model.final_grad_norm < 1e-6


class TestCrossValidation:
    def test_perfect_features_give_f1_one(self, planted_corpus):
        matrix = planted_corpus.matrix()
        result = cross_validated_f1(matrix, k_folds=5, l2=1.0, seed=0)
        assert result.macro_f1 == 1.0

    def test_macro_f1_matches_confusion_recomputation(self, small_planted_corpus):
        result = cross_validated_f1(small_planted_corpus.matrix(), k_folds=4, seed=1)
        assert result.macro_f1 == pytest.approx(macro_f1_from_confusion(result.confusion))

    def test_shuffled_labels_score_near_chance(self):
        rng = np.random.default_rng(0)
        feats = [bool_feat(f"b{j}") for j in range(3)]
        for seed in range(10):
            rows = [
                (f"r{i}", f"c{i % 3}", [B(bool(rng.integers(0, 2))) for _ in range(3)])
                for i in range(300)
            ]
            result = cross_validated_f1(build_matrix(feats, rows), k_folds=5, seed=seed)
            assert abs(result.macro_f1 - 1 / 3) < 0.08

    def test_row_permutation_invariance(self, small_planted_corpus):
        matrix = small_planted_corpus.matrix()
        shuffled = build_matrix(
            list(matrix.feature_set.features),
            [
                (r.example_id, r.label, list(r.values))
                for r in sorted(matrix.rows, key=lambda r: r.example_id[::-1])
            ],
        )
        a = cross_validated_f1(matrix, k_folds=5, seed=3)
        b = cross_validated_f1(shuffled, k_folds=5, seed=3)
        assert a.macro_f1 == b.macro_f1
        np.testing.assert_array_equal(a.confusion, b.confusion)

    def test_too_few_per_class(self):
        m = build_matrix(
            [bool_feat("f")],
            [("a", "x", [B(True)]), ("b", "x", [B(False)]), ("c", "y", [B(True)])],
        )
        with pytest.raises(TooFewPerClass):
            cross_validated_f1(m, k_folds=2)
