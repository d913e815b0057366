"""F1/IoU formulas, counting oracle, and the degradation report contract."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayeseg.degrade import DegradationSpec
from bayeseg.metrics import (
    ConfusionCounts,
    confusion_counts,
    degradation_report,
    f1_score,
    iou,
    pixel_accuracy,
)
from bayeseg.rng import RngStream
from bayeseg.tensor import ShapeError
from bayeseg.uncertainty import McConfig
from bayeseg.unet import ArchConfig, build_model
from bayeseg.data import gen_synthetic


class TestConfusionCounts:
    def test_perfect_prediction(self):
        truth = (RngStream(1, 111).uniform(0, 1, (8, 8)) > 0.6).astype(float)
        c = confusion_counts(truth, truth)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == int(truth.sum())

    def test_inverted_prediction(self):
        truth = (RngStream(2, 112).uniform(0, 1, (8, 8)) > 0.5).astype(float)
        c = confusion_counts(1.0 - truth, truth)
        assert c.tp == 0 and c.tn == 0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_pixel_loop(self, seed):
        rng = RngStream(seed, 113)
        pred = rng.uniform(0, 1, (8, 8), dtype=np.float64)
        truth = (rng.uniform(0, 1, (8, 8)) > 0.5).astype(np.float64)
        c = confusion_counts(pred, truth, threshold=0.5)
        tp = fp = fn = tn = 0
        for i in range(8):
            for j in range(8):
                p = pred[i, j] >= 0.5
                t = truth[i, j] > 0.5
                tp += p and t
                fp += p and not t
                fn += (not p) and t
                tn += (not p) and (not t)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        assert c.total == 64

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion_counts(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_non_binary_truth_rejected(self):
        with pytest.raises(ValueError):
            confusion_counts(np.zeros((2, 2)), np.full((2, 2), 0.3))


class TestScores:
    def test_f1_formula(self):
        assert f1_score(ConfusionCounts(tp=8, fp=2, fn=2, tn=52)) == pytest.approx(0.8)

    def test_iou_formula(self):
        assert iou(ConfusionCounts(tp=8, fp=2, fn=2, tn=52)) == pytest.approx(0.666667, abs=1e-6)

    def test_identical_masks_score_one(self):
        c = ConfusionCounts(tp=10, fp=0, fn=0, tn=54)
        assert f1_score(c) == 1.0 and iou(c) == 1.0

    def test_disjoint_masks_score_zero(self):
        c = ConfusionCounts(tp=0, fp=5, fn=5, tn=54)
        assert f1_score(c) == 0.0 and iou(c) == 0.0

    def test_empty_vs_empty_scores_one(self):
        c = ConfusionCounts(tp=0, fp=0, fn=0, tn=64)
        assert f1_score(c) == 1.0 and iou(c) == 1.0

    @given(tp=st.integers(0, 500), fp=st.integers(0, 500), fn=st.integers(0, 500))
    @settings(max_examples=200, deadline=None)
    def test_iou_le_f1_le_one(self, tp, fp, fn):
        c = ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=1)
        assert 0.0 <= iou(c) <= f1_score(c) <= 1.0

    def test_translation_invariance(self):
        rng = RngStream(3, 114)
        pred = rng.uniform(0, 1, (10, 10), dtype=np.float64)
        truth = (rng.uniform(0, 1, (10, 10)) > 0.7).astype(np.float64)
        c0 = confusion_counts(pred, truth)
        shifted_pred = np.roll(pred, (2, 3), axis=(0, 1))
        shifted_truth = np.roll(truth, (2, 3), axis=(0, 1))
        c1 = confusion_counts(shifted_pred, shifted_truth)
        assert f1_score(c0) == f1_score(c1)
        assert iou(c0) == iou(c1)

    def test_pixel_accuracy(self):
        c = ConfusionCounts(tp=10, fp=2, fn=3, tn=49)
        assert pixel_accuracy(c) == pytest.approx(59 / 64)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1, fp=0, fn=0, tn=0)


def tiny_model(seed=0):
    return build_model(ArchConfig(base_filters=2, depth=2, input_size=16,
                                  cbam_reduction=2), seed=seed)


class TestDegradationReport:
    def _samples(self, n=4):
        return gen_synthetic(n, 16, RngStream(6, 115))

    def test_clean_row_is_zero_change(self):
        model = tiny_model()
        specs = [DegradationSpec(kind="none"),
                 DegradationSpec(kind="blur", blur_sigma=1.5)]
        rows = degradation_report(model, self._samples(), specs,
                                  McConfig(T=3, seed=1))
        assert rows[0].kind == "none"
        assert rows[0].pct_change_unc == 0.0

    def test_report_reproducible(self):
        specs = [DegradationSpec(kind="rician", noise_sigma=0.3, seed=4)]
        a = degradation_report(tiny_model(), self._samples(), specs, McConfig(T=3, seed=2))
        b = degradation_report(tiny_model(), self._samples(), specs, McConfig(T=3, seed=2))
        assert a[0].mean_total_unc == b[0].mean_total_unc
        assert a[0].mean_f1 == b[0].mean_f1

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            degradation_report(tiny_model(), [], [DegradationSpec(kind="none")],
                               McConfig(T=2))

    def test_row_fields(self):
        rows = degradation_report(
            tiny_model(), self._samples(2),
            [DegradationSpec(kind="brightness_contrast", brightness_delta=0.1,
                             contrast_gain=1.2)],
            McConfig(T=2, seed=0))
        row = rows[0]
        assert row.kind == "brightness_contrast"
        assert row.param == "0.1/1.2"
        assert np.isfinite(row.mean_total_unc)
        assert 0.0 <= row.mean_f1 <= 1.0
        assert 0.0 <= row.mean_iou <= 1.0
