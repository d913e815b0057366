"""Segmentation accuracy and the degradation-response report.

F1 = 2tp / (2tp + fp + fn) and IoU = tp / (tp + fp + fn), both defined as 1
when prediction and truth are empty. The report measures how the mean total
predictive uncertainty moves as corruptions of increasing severity are
applied before inference, relative to a clean baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degrade import apply_degradation
from .rng import RngStream
from .tensor import ShapeError
from .uncertainty import McConfig, decompose_uncertainty, mc_predict_batch
from .unet import ModelGraph


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred_prob: np.ndarray, truth: np.ndarray,
                     threshold: float = 0.5) -> ConfusionCounts:
    """Binarize pred at `threshold` (>= counts as positive) and tally pixels."""
    pred_prob = np.asarray(pred_prob)
    truth = np.asarray(truth)
    if pred_prob.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred_prob.shape} != truth shape {truth.shape}")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth mask must be binary {0,1}")
    pred = pred_prob >= threshold
    pos = truth > 0.5
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    tn = int(np.count_nonzero(~pred & ~pos))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def f1_score(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0  # both masks empty
    return 2.0 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def pixel_accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


@dataclass
class ReportRow:
    spec_id: str
    kind: str
    param: str
    mean_total_unc: float
    pct_change_unc: float
    mean_f1: float
    mean_iou: float


def _evaluate_condition(model: ModelGraph, samples, spec, mc: McConfig,
                        threshold: float, batch_size: int):
    """Mean total uncertainty / F1 / IoU over the set under one degradation."""
    images = []
    for i, sample in enumerate(samples):
        img = sample.image[0]
        if spec is not None and spec.kind != "none":
            rng = RngStream(spec.seed, stream_id=i + 1)
            img = apply_degradation(img, spec, rng)
        images.append(np.asarray(img, dtype=np.float64)[None])
    batch = np.stack(images)

    totals, f1s, ious = [], [], []
    for start in range(0, len(samples), batch_size):
        stop = min(start + batch_size, len(samples))
        probs, lvars = mc_predict_batch(model, batch[start:stop], mc)
        for row, i in enumerate(range(start, stop)):
            res = decompose_uncertainty(
                [(probs[t, row], lvars[t, row]) for t in range(mc.T)], mc)
            totals.append(res.mean_total)
            c = confusion_counts(res.mean_map, samples[i].mask[0], threshold)
            f1s.append(f1_score(c))
            ious.append(iou(c))
    return float(np.mean(totals)), float(np.mean(f1s)), float(np.mean(ious))


def degradation_report(model: ModelGraph, samples, specs, mc: McConfig,
                       threshold: float = 0.5, batch_size: int = 16) -> list[ReportRow]:
    """One row per spec: uncertainty and accuracy vs the clean baseline."""
    if not samples:
        raise ValueError("degradation_report: empty test set")
    if mc.T < 2:
        raise ValueError("degradation_report needs T >= 2 for the variance terms")
    baseline_unc, baseline_f1, baseline_iou = _evaluate_condition(
        model, samples, None, mc, threshold, batch_size)
    rows = []
    for spec in specs:
        if spec.kind == "none":
            unc, f1v, iouv = baseline_unc, baseline_f1, baseline_iou
        else:
            unc, f1v, iouv = _evaluate_condition(model, samples, spec, mc,
                                                 threshold, batch_size)
        pct = 100.0 * (unc - baseline_unc) / baseline_unc if baseline_unc else 0.0
        rows.append(ReportRow(spec_id=spec.id, kind=spec.kind, param=spec.param,
                              mean_total_unc=unc, pct_change_unc=pct,
                              mean_f1=f1v, mean_iou=iouv))
    return rows
