import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multissl.errors import ConfigError, ContractError
from multissl.metrics import (confusion_matrix, weighted_metrics_multilabel,
                              weighted_metrics_single)


class TestConfusionMatrix:
    def test_perfect_diagonal_equals_supports(self):
        labels = np.array([0, 0, 1, 2, 2, 2])
        conf = confusion_matrix(labels, labels, 3)
        assert np.array_equal(np.diag(conf), [2, 1, 3])
        assert conf.sum() == 6

    def test_single_misprediction_position(self):
        conf = confusion_matrix([2], [1], 3)
        assert conf[1, 2] == 1 and conf.sum() == 1

    def test_matches_pairwise_counting_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 4, size=50)
        labels = rng.integers(0, 4, size=50)
        conf = confusion_matrix(preds, labels, 4)
        for i in range(4):
            for j in range(4):
                assert conf[i, j] == int(np.sum((labels == i) & (preds == j)))

    def test_row_sums_are_class_supports(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 3, size=30)
        labels = rng.integers(0, 3, size=30)
        conf = confusion_matrix(preds, labels, 3)
        for c in range(3):
            assert conf[c].sum() == int(np.sum(labels == c))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            confusion_matrix([0, 1], [0], 2)


class TestSingleLabelMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 1, 2, 2, 2])
        report = weighted_metrics_single(labels, labels, 3)
        assert report.weighted_accuracy == pytest.approx(1.0)
        assert report.weighted_f1 == pytest.approx(1.0)
        assert report.weighted_precision == pytest.approx(1.0)
        assert report.weighted_recall == pytest.approx(1.0)
        assert np.array_equal(np.diag(report.confusion), [1, 2, 3])

    def test_all_wrong_predictions(self):
        labels = np.array([0, 1, 2])
        preds = np.array([1, 2, 0])
        report = weighted_metrics_single(preds, labels, 3)
        assert report.weighted_accuracy == 0.0

    def test_hand_confusion_matrix_oracle(self):
        # confusion [[2,1,0],[0,3,0],[1,0,3]] reconstructed from labels
        labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
        preds = np.array([0, 0, 1, 1, 1, 1, 2, 2, 2, 0])
        report = weighted_metrics_single(preds, labels, 3)
        conf = report.confusion
        assert conf.tolist() == [[2, 1, 0], [0, 3, 0], [1, 0, 3]]
        # hand-derived from the matrix: precisions 2/3, 3/4, 3/3; recalls 2/3, 1, 3/4
        assert report.per_class[0].precision == pytest.approx(2 / 3)
        assert report.per_class[1].precision == pytest.approx(3 / 4)
        assert report.per_class[2].precision == pytest.approx(1.0)
        assert report.per_class[0].recall == pytest.approx(2 / 3)
        assert report.per_class[1].recall == pytest.approx(1.0)
        assert report.per_class[2].recall == pytest.approx(3 / 4)
        expected_wacc = (3 * (2 / 3) + 3 * 1.0 + 4 * (3 / 4)) / 10
        assert report.weighted_accuracy == pytest.approx(expected_wacc)
        expected_prec = (3 * (2 / 3) + 3 * (3 / 4) + 4 * 1.0) / 10
        assert report.weighted_precision == pytest.approx(expected_prec)

    def test_zero_support_class_contributes_nothing(self):
        labels = np.array([0, 0, 1])
        preds = np.array([0, 0, 1])
        report = weighted_metrics_single(preds, labels, 3)
        assert report.per_class[2].support == 0
        assert report.weighted_accuracy == pytest.approx(1.0)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_weighted_accuracy_equals_plain_accuracy(self, pairs):
        preds = np.array([p for p, _ in pairs])
        labels = np.array([t for _, t in pairs])
        report = weighted_metrics_single(preds, labels, 4)
        plain = float(np.mean(preds == labels))
        assert report.weighted_accuracy == pytest.approx(plain, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=1, max_size=40),
           st.permutations(list(range(4))))
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_class_permutation(self, pairs, perm):
        perm = np.array(perm)
        preds = np.array([p for p, _ in pairs])
        labels = np.array([t for _, t in pairs])
        a = weighted_metrics_single(preds, labels, 4)
        b = weighted_metrics_single(perm[preds], perm[labels], 4)
        assert a.weighted_accuracy == pytest.approx(b.weighted_accuracy)
        assert a.weighted_f1 == pytest.approx(b.weighted_f1)
        assert a.weighted_precision == pytest.approx(b.weighted_precision)

    def test_confusion_total_is_n(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 5, size=77)
        labels = rng.integers(0, 5, size=77)
        report = weighted_metrics_single(preds, labels, 5)
        assert report.confusion.sum() == 77

    def test_report_dict_schema(self):
        report = weighted_metrics_single([0, 1], [0, 1], 2, class_names=["neg", "pos"])
        doc = report.to_dict()
        assert set(doc) >= {"task_type", "metrics", "per_class", "confusion",
                            "definitions", "class_names"}
        assert doc["definitions"]["wacc"]
        assert doc["per_class"][0]["class"] == "neg"


class TestMultiLabelMetrics:
    def test_perfect_predictions(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        scores = labels.astype(np.float64) * 0.9 + 0.05
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        assert report.weighted_accuracy == pytest.approx(1.0)
        for pc in report.per_class:
            assert pc.weighted_accuracy == pytest.approx(1.0)

    def test_all_negative_predictor_scores_half(self):
        labels = np.array([[1], [0], [1], [0]])
        scores = np.zeros((4, 1))
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        # TP=0 so only the TN term remains: (0 + N) / (2N) = 0.5
        assert report.per_class[0].weighted_accuracy == pytest.approx(0.5)

    def test_wa_formula_hand_case(self):
        # P=2 positives, N=3 negatives, TP=1, TN=2
        labels = np.array([[1], [1], [0], [0], [0]])
        scores = np.array([[0.9], [0.1], [0.8], [0.2], [0.3]])
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        expected = (1 * (3 / 2) + 2) / (2 * 3)
        assert report.per_class[0].weighted_accuracy == pytest.approx(expected)

    def test_score_at_threshold_is_negative(self):
        labels = np.array([[1]])
        scores = np.array([[0.5]])
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        # strict >: the single positive is missed
        assert report.per_class[0].recall == 0.0

    def test_zero_positive_class_flagged(self):
        labels = np.array([[1, 0], [1, 0]])
        scores = np.array([[0.9, 0.1], [0.9, 0.2]])
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        assert report.per_class[1].flagged
        assert report.per_class[1].weighted_accuracy == pytest.approx(1.0)  # TN/N
        assert not report.per_class[0].flagged

    def test_aggregate_is_support_weighted(self):
        labels = np.array([[1, 1], [1, 0], [1, 0]])   # supports 3 and 1
        scores = np.array([[0.9, 0.1], [0.9, 0.9], [0.1, 0.1]])
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        wa = [pc.weighted_accuracy for pc in report.per_class]
        expected = (3 * wa[0] + 1 * wa[1]) / 4
        assert report.weighted_accuracy == pytest.approx(expected)

    def test_per_class_confusion_cells(self):
        labels = np.array([[1], [0], [1], [0]])
        scores = np.array([[0.9], [0.9], [0.1], [0.1]])
        report = weighted_metrics_multilabel(scores, labels, threshold=0.5)
        (tn, fp), (fn, tp) = report.per_class_confusion[0]
        assert (tn, fp, fn, tp) == (1, 1, 1, 1)

    def test_threshold_validation(self):
        with pytest.raises(ConfigError):
            weighted_metrics_multilabel(np.zeros((1, 1)), np.zeros((1, 1)),
                                        threshold=1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            weighted_metrics_multilabel(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_metrics_in_unit_interval(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=(40, 5))
        scores = rng.random(size=(40, 5))
        report = weighted_metrics_multilabel(scores, labels)
        for value in (report.weighted_accuracy, report.weighted_f1,
                      report.weighted_precision, report.weighted_recall):
            assert 0.0 <= value <= 1.0
        for pc in report.per_class:
            assert 0.0 <= pc.weighted_accuracy <= 1.0
