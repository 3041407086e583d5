"""Tests for the sklearn-style estimator facades."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from revmux.data import synth_task
from revmux.estimator import (
    EncoderTextClassifier,
    MultiplexedTextClassifier,
    as_examples,
    check_labels,
)

FAST = dict(d_model=32, n_heads=2, n_layers=2, ffn_dim=48, epochs=6, dropout_rate=0.0)


@pytest.fixture(scope="module")
def keyword_text():
    train, evaluation = synth_task("keyword", 256, 64, seed=0)
    return (
        [ex.text_a for ex in train],
        np.array([ex.label for ex in train]),
        [ex.text_a for ex in evaluation],
        np.array([ex.label for ex in evaluation]),
    )


@pytest.fixture(scope="module")
def fitted_backbone(keyword_text):
    X, y, _, _ = keyword_text
    return EncoderTextClassifier(**FAST, seed=1).fit(X, y)


class TestInputHelpers:
    def test_as_examples_strings_and_pairs(self):
        exs = as_examples(["plain", ("left", "right")], [0, 1])
        assert exs[0].text_b is None
        assert exs[1].text_b == "right"
        assert [e.label for e in exs] == [0, 1]

    def test_as_examples_rejects_bad_entries(self):
        with pytest.raises(ValueError):
            as_examples([42], [0])
        with pytest.raises(ValueError):
            as_examples(["a"], [0, 1])

    def test_check_labels(self):
        np.testing.assert_array_equal(check_labels([1, 0, 1]), [1, 0, 1])
        np.testing.assert_array_equal(check_labels(np.array([1.0, 0.0])), [1, 0])
        with pytest.raises(ValueError):
            check_labels([[1], [0]])
        with pytest.raises(ValueError):
            check_labels([0.5])
        with pytest.raises(ValueError):
            check_labels([])


class TestEncoderTextClassifier:
    def test_params_round_trip_and_clone(self):
        est = EncoderTextClassifier(d_model=32, epochs=3, seed=7)
        params = est.get_params()
        assert params["d_model"] == 32 and params["seed"] == 7
        est.set_params(epochs=5)
        assert est.epochs == 5
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            EncoderTextClassifier().predict(["hello"])

    def test_fit_predict_learns_keyword_task(self, fitted_backbone, keyword_text):
        _, _, X_eval, y_eval = keyword_text
        acc = fitted_backbone.score(X_eval, y_eval)
        assert acc >= 0.8

    def test_predict_proba_rows_are_distributions(self, fitted_backbone, keyword_text):
        _, _, X_eval, _ = keyword_text
        proba = fitted_backbone.predict_proba(X_eval[:10])
        assert proba.shape == (10, 2)
        np.testing.assert_allclose(proba.sum(axis=-1), 1.0, atol=1e-6)
        assert (proba >= 0).all()

    def test_predict_maps_back_to_original_label_values(self, keyword_text):
        X, y, _, _ = keyword_text
        shifted = y + 5  # classes {5, 6}
        est = EncoderTextClassifier(**{**FAST, "epochs": 1}, seed=2).fit(X[:64], shifted[:64])
        preds = est.predict(X[:16])
        assert set(preds) <= {5, 6}
        np.testing.assert_array_equal(est.classes_, [5, 6])


class TestMultiplexedTextClassifier:
    def test_params_and_clone(self):
        est = MultiplexedTextClassifier(n_inputs=4, infonce_weight=0.25)
        assert est.get_params()["n_inputs"] == 4
        dup = clone(est)
        assert dup.get_params()["infonce_weight"] == 0.25

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            MultiplexedTextClassifier().predict(["x"])

    def test_requires_fitted_backbone_when_given(self):
        est = MultiplexedTextClassifier(backbone=EncoderTextClassifier())
        with pytest.raises(NotFittedError):
            est.fit(["a b", "c d"], [0, 1])

    def test_fit_reuses_backbone_and_predicts_every_input(self, fitted_backbone, keyword_text):
        X, y, X_eval, y_eval = keyword_text
        est = MultiplexedTextClassifier(
            n_inputs=2, epochs=2, seed=3, backbone=fitted_backbone
        ).fit(X[:128], y[:128])
        assert est.prefill_layers_ == fitted_backbone.model_.cfg.n_layers // 2
        preds = est.predict(X_eval)
        assert preds.shape == (len(X_eval),)
        assert set(preds) <= set(est.classes_)
        assert est.score(X_eval, y_eval) > 0.5

    def test_eval_report_round_count(self, fitted_backbone, keyword_text):
        X, y, X_eval, y_eval = keyword_text
        est = MultiplexedTextClassifier(
            n_inputs=2, epochs=1, seed=4, backbone=fitted_backbone
        ).fit(X[:64], y[:64])
        report = est.eval_report(X_eval, y_eval, rounds=3)
        assert len(report.rounds) == 3
        assert report.n_inputs == 2

    def test_trains_own_backbone_when_none_given(self, keyword_text):
        X, y, X_eval, y_eval = keyword_text
        est = MultiplexedTextClassifier(
            n_inputs=2, epochs=1, seed=5,
            backbone_params={**FAST, "epochs": 2},
        ).fit(X[:96], y[:96])
        assert hasattr(est.backbone_, "model_")
        assert est.predict(X_eval[:8]).shape == (8,)
