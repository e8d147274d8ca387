import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from pixtrip.metrics import binarize, evaluate, mean_record, record_from_counts

from oracles import naive_counts


class TestBinarize:
    def test_foreground_wins(self):
        z = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
        assert binarize(z).tolist() == [[1, 1], [1, 1]]

    def test_tie_is_background(self):
        assert binarize(np.zeros((2, 3, 3))).sum() == 0

    def test_matches_argmax(self, rng):
        z = rng.normal(size=(4, 2, 7, 5))
        ties = rng.random((4, 7, 5)) < 0.1
        z[:, 1][ties] = z[:, 0][ties]
        assert np.array_equal(binarize(z), np.where(ties, 0, np.argmax(z, axis=1)))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            binarize(np.zeros((3, 2, 2)))


class TestEvaluate:
    def test_identical(self):
        m = np.array([[1, 0], [1, 1]])
        r = evaluate(m, m)
        assert (r.precision, r.jaccard) == (1.0, 1.0)

    def test_disjoint(self):
        assert evaluate(np.array([[1, 0]]), np.array([[0, 1]])).jaccard == 0.0

    def test_counted_example(self):
        pred = np.zeros((4, 4), int)
        gt = np.zeros((4, 4), int)
        pred[0, :4] = 1  # 4 predicted
        gt[0, :2] = 1  # 2 of them correct
        gt[1, :4] = 1  # 4 missed
        r = evaluate(pred, gt)
        assert r.counts == (2, 2, 4, 8)
        assert r.precision == 0.5
        assert r.jaccard == 0.25
        assert r.pixel_accuracy == 0.625

    def test_empty_prediction_flag(self):
        r = evaluate(np.zeros((3, 3)), np.eye(3))
        assert r.precision == 0.0 and r.precision_undefined
        assert not r.jaccard_undefined

    def test_both_empty(self):
        r = evaluate(np.zeros((2, 2)), np.zeros((2, 2)))
        assert r.jaccard == 1.0 and r.jaccard_undefined

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evaluate(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_matches_naive_counter(self, rng):
        for _ in range(1000):
            h, w = rng.integers(1, 12, size=2)
            pred = rng.random((h, w)) < rng.random()
            gt = rng.random((h, w)) < rng.random()
            r = evaluate(pred, gt)
            tp, fp, fn, tn = naive_counts(pred, gt)
            assert r.counts == (tp, fp, fn, tn)
            ref = record_from_counts(tp, fp, fn, tn)
            assert (r.precision, r.jaccard, r.pixel_accuracy) == (ref.precision, ref.jaccard, ref.pixel_accuracy)
            assert r.pixel_accuracy == (tp + tn) / (h * w)
            if tp + fp + fn:
                assert r.jaccard == tp / (tp + fp + fn)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.bool_, (5, 6)),
        arrays(np.bool_, (5, 6)),
    )
    def test_bounds_and_symmetry(self, pred, gt):
        r = evaluate(pred, gt)
        for v in (r.precision, r.jaccard, r.pixel_accuracy):
            assert 0.0 <= v <= 1.0
        if r.tp + r.fp:
            assert r.jaccard <= r.tp / (r.tp + r.fp)
        if r.tp + r.fn:
            assert r.jaccard <= r.tp / (r.tp + r.fn)
        assert evaluate(gt, pred).jaccard == r.jaccard


def test_mean_record():
    recs = [record_from_counts(1, 0, 0, 3), record_from_counts(0, 1, 1, 2)]
    m = mean_record(recs)
    assert m == {"precision": 0.5, "pixel_accuracy": 0.75, "jaccard": 0.5}
    with pytest.raises(ValueError):
        mean_record([])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_record_scores_from_counts(tp, fp, fn, tn):
    r = record_from_counts(tp, fp, fn, tn)
    assert r.precision_undefined == (tp + fp == 0)
    if tp + fp:
        assert r.precision == tp / (tp + fp)
