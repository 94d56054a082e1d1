"""Tests for Recall@K, classification accuracy, and top-k confidence listing."""

import numpy as np
import pytest

from smoothproxy.evaluation import (
    RecallReport,
    classification_accuracy,
    recall_at_k,
    topk_confidences,
)
from smoothproxy.numerics import SeededRng, l2_normalize_rows

from oracles import recall_reference

# 2-D points on the unit circle: class 0 at 0 and 40 degrees, class 1 at 50
# and 90, class 2 at 180 and 185. The 40-degree point sits nearer to class 1
# than to its partner, and so does the 50-degree point to class 0, so exactly
# those two queries miss at K=1 and every query recovers by K=2.
FIXTURE_ANGLES = np.deg2rad([0.0, 40.0, 50.0, 90.0, 180.0, 185.0])
FIXTURE_LABELS = np.array([0, 0, 1, 1, 2, 2])
FIXTURE_R1 = 0.6666666666666666
FIXTURE_R2 = 1.0


def circle_points(angles):
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def unit_rows(rng, n, d):
    return l2_normalize_rows(rng.standard_normal((n, d)), "rows")


def labels_with_partners(gen, n, classes):
    """Random labels where every present class has at least 2 samples."""
    while True:
        labs = gen.integers(0, classes, size=n)
        _, counts = np.unique(labs, return_counts=True)
        if counts.min() >= 2:
            return labs


class TestRecallFixtures:
    def test_identical_pair_same_label(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0]])
        report = recall_at_k(emb, [3, 3], ks=[1])
        assert report.recall_at[1] == 1.0
        assert report.query_count == 2
        assert report.gallery_count == 1

    def test_orthogonal_pair_different_labels(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        with pytest.warns(UserWarning, match="single sample"):
            report = recall_at_k(emb, [0, 1], ks=[1])
        assert report.recall_at[1] == 0.0
        assert set(report.singleton_labels) == {0, 1}

    def test_six_point_fixture_matches_hand_ranking(self):
        emb = circle_points(FIXTURE_ANGLES)
        report = recall_at_k(emb, FIXTURE_LABELS, ks=[1, 2])
        assert report.recall_at[1] == FIXTURE_R1
        assert report.recall_at[2] == FIXTURE_R2

    def test_six_point_fixture_matches_oracle(self):
        emb = circle_points(FIXTURE_ANGLES)
        sims = emb @ emb.T
        expected = recall_reference(sims, FIXTURE_LABELS, [1, 2])
        report = recall_at_k(emb, FIXTURE_LABELS, ks=[1, 2])
        assert report.recall_at == expected

    def test_similarity_ties_broken_by_sample_index(self):
        # queries from the duplicated row tie between indexes 1 and 2; the
        # stable rule ranks index 1 first, which carries the wrong label
        emb = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        with pytest.warns(UserWarning):
            report = recall_at_k(emb, [0, 1, 0], ks=[1, 2])
        assert report.recall_at[1] == 0.0
        assert report.recall_at[2] == pytest.approx(2.0 / 3.0)


class TestRecallProperties:
    def test_matches_brute_force_oracle(self):
        rng = SeededRng(404).generator
        for trial in range(30):
            n = int(rng.integers(4, 51))
            d = int(rng.integers(2, 9))
            emb = unit_rows(rng, n, d)
            labs = labels_with_partners(rng, n, int(rng.integers(2, 6)))
            ks = sorted(set(int(k) for k in rng.integers(1, n, size=4)))
            report = recall_at_k(emb, labs, ks=ks)
            assert report.recall_at == recall_reference(emb @ emb.T, labs, ks)

    def test_monotone_in_k(self):
        rng = SeededRng(405).generator
        for trial in range(10):
            emb = unit_rows(rng, 30, 5)
            labs = labels_with_partners(rng, 30, 4)
            report = recall_at_k(emb, labs, ks=range(1, 30))
            values = [report.recall_at[k] for k in range(1, 30)]
            assert all(b >= a for a, b in zip(values, values[1:]))

    def test_rotation_invariance(self):
        rng = SeededRng(406).generator
        emb = unit_rows(rng, 40, 6)
        labs = labels_with_partners(rng, 40, 5)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        base = recall_at_k(emb, labs)
        rotated = recall_at_k(emb @ q, labs)
        for k in base.recall_at:
            assert abs(base.recall_at[k] - rotated.recall_at[k]) <= 1e-12

    def test_full_gallery_recall_is_one(self):
        rng = SeededRng(407).generator
        emb = unit_rows(rng, 12, 4)
        labs = labels_with_partners(rng, 12, 3)
        report = recall_at_k(emb, labs, ks=[11])
        assert report.recall_at[11] == 1.0

    def test_singleton_counts_as_failed_query(self):
        # 2 paired samples retrieve each other; the singleton always misses
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.warns(UserWarning, match=r"\[7\]"):
            report = recall_at_k(emb, [2, 2, 7], ks=[1, 2])
        assert report.recall_at[1] == pytest.approx(2.0 / 3.0)
        assert report.recall_at[2] == pytest.approx(2.0 / 3.0)
        assert report.singleton_labels == (7,)


class TestRecallValidation:
    def test_k_bounds(self):
        emb = np.eye(3)
        with pytest.raises(ValueError, match="outside"):
            recall_at_k(emb, [0, 0, 0], ks=[3])
        with pytest.raises(ValueError, match="outside"):
            recall_at_k(emb, [0, 0, 0], ks=[0])

    def test_minimum_samples(self):
        with pytest.raises(ValueError, match="at least 2"):
            recall_at_k(np.ones((1, 3)), [0], ks=[1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            recall_at_k(np.eye(3), [0, 1], ks=[1])

    def test_empty_ks(self):
        with pytest.raises(ValueError, match="nonempty"):
            recall_at_k(np.eye(3), [0, 0, 0], ks=[])

    def test_report_rejects_decreasing_values(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            RecallReport({1: 0.9, 2: 0.5}, 10, 9)
        with pytest.raises(ValueError, match="outside"):
            RecallReport({1: 1.5}, 10, 9)

    def test_report_to_dict_is_json_shaped(self):
        report = RecallReport({2: 0.5, 1: 0.25}, 10, 9, (3,))
        out = report.to_dict()
        assert out["recall_at"] == {"1": 0.25, "2": 0.5}
        assert out["singleton_labels"] == [3]


class TestClassificationAccuracy:
    def test_one_hot_matching(self):
        conf = np.eye(4)
        assert classification_accuracy(conf, [0, 1, 2, 3]) == 1.0

    def test_uniform_rows_tie_to_class_zero(self):
        conf = np.full((5, 3), 1.0 / 3.0)
        labels = [0, 1, 2, 0, 1]
        assert classification_accuracy(conf, labels) == pytest.approx(2.0 / 5.0)

    def test_matches_loop_oracle(self):
        gen = SeededRng(71).generator
        conf = gen.uniform(size=(40, 6))
        labels = gen.integers(0, 6, size=40)
        correct = sum(
            1 for i in range(40) if int(np.argmax(conf[i])) == labels[i])
        assert classification_accuracy(conf, labels) == pytest.approx(correct / 40)

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError, match="outside"):
            classification_accuracy(np.eye(3), [0, 1, 3])
        with pytest.raises(ValueError, match="length"):
            classification_accuracy(np.eye(3), [0, 1])


class TestTopkConfidences:
    def test_strictly_decreasing_row_is_identity(self):
        conf = np.array([[0.9, 0.5, 0.1]])
        assert topk_confidences(conf, 3) == [[(0, 0.9), (1, 0.5), (2, 0.1)]]

    def test_unsorted_row(self):
        conf = np.array([[0.2, 0.7, 0.1]])
        assert topk_confidences(conf, 2) == [[(1, 0.7), (0, 0.2)]]

    def test_ties_ordered_by_class_index(self):
        conf = np.array([[0.5, 0.9, 0.5]])
        assert topk_confidences(conf, 3) == [[(1, 0.9), (0, 0.5), (2, 0.5)]]

    def test_k_bounds(self):
        conf = np.ones((2, 3))
        with pytest.raises(ValueError, match="outside"):
            topk_confidences(conf, 0)
        with pytest.raises(ValueError, match="outside"):
            topk_confidences(conf, 4)

    def test_python_scalar_types(self):
        out = topk_confidences(np.array([[0.25, 0.75]]), 1)
        cls, val = out[0][0]
        assert isinstance(cls, int) and isinstance(val, float)
