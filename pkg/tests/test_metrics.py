"""Semantic and over-segmentation metrics."""

import numpy as np
import pytest

from segmap3d.metrics import (oversegmentation_error, segment_size_stats,
                              semantic_metrics, undersegmentation_error)


class TestSemanticMetrics:
    def test_perfect_prediction(self):
        gt = np.array([0, 1, 2, 1, 0])
        m = semantic_metrics(gt, gt, 3)
        assert m.miou == pytest.approx(100.0)
        assert m.macc == pytest.approx(100.0)

    def test_counting_example(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        m = semantic_metrics(gt, pred, 2)
        assert m.per_class_iou[0] == pytest.approx(100 / 2)
        assert m.per_class_iou[1] == pytest.approx(100 * 2 / 3)
        assert m.miou == pytest.approx(100 * (0.5 + 2 / 3) / 2)
        assert m.macc == pytest.approx(100 * (0.5 + 1.0) / 2)

    def test_all_ignored(self):
        gt = np.full(6, 9)
        pred = np.zeros(6, dtype=int)
        m = semantic_metrics(gt, pred, 10, ignore_label=9)
        assert np.isnan(m.miou) and np.isnan(m.macc)

    def test_absent_class_excluded(self):
        gt = np.array([0, 0, 0])
        pred = np.array([0, 0, 2])
        m = semantic_metrics(gt, pred, 3)
        assert np.isnan(m.per_class_iou[1])
        assert m.macc == pytest.approx(100 * 2 / 3)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 4, 200)
        pred = rng.integers(0, 4, 200)
        m1 = semantic_metrics(gt, pred, 4)
        p = rng.permutation(200)
        m2 = semantic_metrics(gt[p], pred[p], 4)
        assert m1.miou == m2.miou and m1.macc == m2.macc

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            semantic_metrics([0, 1], [0], 2)


class TestUse:
    def test_refinement_is_zero(self):
        gt = np.array([0, 0, 0, 1, 1, 1])
        seg = np.array([0, 0, 1, 2, 3, 3])
        assert undersegmentation_error(seg, gt) == 0.0

    def test_full_straddle(self):
        gt = np.array([0] * 4 + [1] * 4)
        seg = np.zeros(8, dtype=int)
        assert undersegmentation_error(seg, gt) == pytest.approx(100.0)

    def test_singletons_zero(self):
        gt = np.array([0, 0, 1, 1, 2])
        seg = np.arange(5)
        assert undersegmentation_error(seg, gt) == 0.0

    def test_zero_iff_contained(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, 50)
        # segments nested within gt regions: zero error
        seg = gt * 10 + rng.integers(0, 2, 50)
        assert undersegmentation_error(seg, gt) == 0.0
        # one straddling element makes it positive
        seg2 = seg.copy()
        seg2[np.nonzero(gt == 0)[0][0]] = seg2[np.nonzero(gt == 1)[0][0]]
        assert undersegmentation_error(seg2, gt) > 0.0


class TestOse:
    def test_pure_segments(self):
        gt = np.array([0, 0, 1, 1, 2, 2])
        seg = np.array([5, 5, 9, 9, 7, 7])
        ose, propagated = oversegmentation_error(seg, gt)
        assert ose == pytest.approx(0.0)
        np.testing.assert_array_equal(propagated, gt)

    def test_majority_example(self):
        gt = np.array([0, 0, 0, 1])
        seg = np.zeros(4, dtype=int)
        ose, propagated = oversegmentation_error(seg, gt)
        assert ose == pytest.approx(50.0)
        np.testing.assert_array_equal(propagated, [0, 0, 0, 0])

    def test_singletons(self):
        gt = np.array([0, 1, 2, 1])
        ose, _ = oversegmentation_error(np.arange(4), gt)
        assert ose == pytest.approx(0.0)

    def test_tie_breaks_to_smaller_class(self):
        gt = np.array([3, 1, 1, 3])
        seg = np.zeros(4, dtype=int)
        _, propagated = oversegmentation_error(seg, gt)
        assert propagated[0] == 1

    def test_identity_with_semantic_metrics(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(0, 5, 300)
        seg = rng.integers(0, 40, 300)
        ose, propagated = oversegmentation_error(seg, gt, 5)
        m = semantic_metrics(gt, propagated, 5)
        assert ose == pytest.approx(100.0 - m.macc)
        assert ose <= 100.0


class TestSizeStats:
    def test_equal_sizes(self):
        s = segment_size_stats([0] * 90 + [1] * 90)
        assert (s.count, s.mean, s.std) == (2, 90.0, 0.0)

    def test_population_std(self):
        s = segment_size_stats([0] * 60 + [1] * 120)
        assert s.mean == pytest.approx(90.0)
        assert s.std == pytest.approx(30.0)

    def test_empty(self):
        s = segment_size_stats([])
        assert s.count == 0
        assert np.isnan(s.mean) and np.isnan(s.std)
