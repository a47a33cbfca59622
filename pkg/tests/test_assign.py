import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cascade_det.assign import (
    GroundTruth,
    InsufficientPositivesError,
    LabeledSample,
    compute_stats,
    histogram_from_ious,
    iou_histogram,
    label_boxes,
    match_and_label,
    sample_minibatch,
)
from cascade_det.geometry import Box, Delta, iou


def _box_at_iou(target: float) -> Box:
    """Box horizontally shifted off Box(50, 50, 100, 100) with the requested IoU.

    Shift s gives IoU (100 - s) / (100 + s), so s = 100 (1 - t) / (1 + t).
    """
    s = 100 * (1 - target) / (1 + target)
    return Box(50 + s, 50, 100, 100)


GT = GroundTruth(Box(50, 50, 100, 100), 3)


def _sample(label, i=0.7, target=(0.1, 0, 0, 0)):
    if label:
        return LabeledSample(Box(1, 1, 1, 1), label, i, 0, Delta(*target))
    return LabeledSample(Box(1, 1, 1, 1), 0, i)


class TestMatchAndLabel:
    def test_positive_at_06(self):
        (s,) = match_and_label([_box_at_iou(0.6)], [GT], 0.5)
        assert s.label == 3
        assert s.iou == pytest.approx(0.6)
        assert s.target is not None and s.matched_gt == 0

    def test_negative_at_049(self):
        (s,) = match_and_label([_box_at_iou(0.49)], [GT], 0.5)
        assert s.label == 0 and s.target is None and s.matched_gt is None

    def test_no_gts(self):
        (s,) = match_and_label([Box(5, 5, 10, 10)], [], 0.5)
        assert s.label == 0 and s.target is None and s.iou == 0.0

    def test_tie_goes_to_lowest_gt_index(self):
        gts = [GroundTruth(Box(50, 50, 100, 100), 1), GroundTruth(Box(50, 50, 100, 100), 2)]
        (s,) = match_and_label([Box(50, 50, 100, 100)], gts, 0.5)
        assert s.label == 1 and s.matched_gt == 0

    def test_background_class_reserved(self):
        with pytest.raises(ValueError):
            GroundTruth(Box(1, 1, 1, 1), 0)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            match_and_label([Box(1, 1, 1, 1)], [GT], 1.0)

    def test_stored_iou_is_exact(self):
        rng = np.random.default_rng(1)
        gts = [GroundTruth(Box(*rng.uniform(50, 200, 2), *rng.uniform(20, 80, 2)), 1) for _ in range(4)]
        props = [Box(*rng.uniform(50, 200, 2), *rng.uniform(20, 80, 2)) for _ in range(200)]
        for s in match_and_label(props, gts, 0.3):
            if s.label:
                assert s.iou == iou(s.box, gts[s.matched_gt].box)
                assert s.iou >= 0.3

    @given(st.lists(st.floats(0.05, 0.99), min_size=1, max_size=20), st.floats(0.1, 0.8), st.floats(0.0, 0.19))
    def test_monotone_in_threshold(self, levels, u, bump):
        props = [_box_at_iou(t) for t in levels]
        low = match_and_label(props, [GT], u)
        high = match_and_label(props, [GT], u + bump)
        for a, b in zip(low, high):
            assert not (a.label == 0 and b.label > 0)


class TestSampling:
    def _samples(self, n_pos, n_neg):
        return [_sample(1)] * n_pos + [_sample(0)] * n_neg

    def test_fg_fraction(self):
        batch = sample_minibatch(self._samples(200, 800), 128, 0.25, np.random.default_rng(0))
        n_pos = sum(s.label > 0 for s in batch)
        assert (n_pos, len(batch) - n_pos) == (32, 96)

    def test_scarce_positives_filled_with_negatives(self):
        batch = sample_minibatch(self._samples(10, 800), 128, 0.25, np.random.default_rng(0))
        n_pos = sum(s.label > 0 for s in batch)
        assert (n_pos, len(batch) - n_pos) == (10, 118)

    def test_same_seed_same_batch(self):
        rng_labels = np.random.default_rng(5).integers(0, 3, 500)
        samples = [LabeledSample(Box(i + 1, 1, 1, 1), int(l), 0.6, 0 if l else None, Delta(0, 0, 0, 0) if l else None) for i, l in enumerate(rng_labels)]
        a = sample_minibatch(samples, 64, 0.25, np.random.default_rng(7))
        b = sample_minibatch(samples, 64, 0.25, np.random.default_rng(7))
        assert a == b

    def test_empty(self):
        assert sample_minibatch([], 64, 0.25, np.random.default_rng(0)) == []

    def test_label_arrays_agree_with_objects(self):
        lab = label_boxes(np.array([[50, 50, 100, 100], [500, 500, 10, 10]]), np.array([[50, 50, 100, 100]]), np.array([2]), 0.5)
        assert list(lab.labels) == [2, 0]
        assert np.isnan(lab.targets[1]).all()


class TestStats:
    def test_identical_targets_floor_std(self):
        s = compute_stats([_sample(1, target=(0.2, 0.1, 0, 0))] * 5, 0.5)
        assert s.mean == pytest.approx((0.2, 0.1, 0, 0))
        assert s.std == (1e-4, 1e-4, 1e-4, 1e-4)

    def test_population_std(self):
        s = compute_stats([_sample(1, target=(0.1, 0, 0, 0)), _sample(1, target=(-0.1, 0, 0, 0))], 0.5)
        assert s.mean[0] == pytest.approx(0.0, abs=1e-15)
        assert s.std[0] == pytest.approx(0.1, abs=1e-15)

    def test_outliers_below_threshold_excluded(self):
        kept = [_sample(1, 0.8, (0.1, 0, 0, 0)), _sample(1, 0.8, (-0.1, 0, 0, 0))]
        outlier = _sample(1, 0.55, (5.0, 0, 0, 0))
        s = compute_stats(kept + [outlier], 0.7)
        assert s.mean[0] == pytest.approx(0.0, abs=1e-15)
        assert s.std[0] == pytest.approx(0.1)

    def test_insufficient(self):
        with pytest.raises(InsufficientPositivesError):
            compute_stats([_sample(1), _sample(0)], 0.5)


class TestHistogram:
    def test_all_at_one(self):
        h = iou_histogram([_sample(0, 1.0)] * 4, 0.1, [0.5, 0.9])
        assert h.counts[-1] == 4 and h.counts[:-1].sum() == 0
        assert h.fractions == {0.5: 100.0, 0.9: 100.0}

    def test_empty(self):
        h = iou_histogram([], 0.1, [0.5])
        assert h.counts.sum() == 0 and len(h.counts) == 10

    def test_uniform_levels(self):
        ious = np.linspace(0.1, 1.0, 10)
        h = histogram_from_ious(ious, 0.1, [0.5])
        assert h.fractions[0.5] == pytest.approx(60.0)
        assert h.counts.sum() == 10

    def test_rows_cover_unit_interval(self):
        rows = histogram_from_ious(np.array([0.12, 0.55]), 0.25).rows()
        assert rows[0][0] == 0.0 and rows[-1][1] == 1.0
        assert [r[2] for r in rows] == [1, 0, 1, 0]
