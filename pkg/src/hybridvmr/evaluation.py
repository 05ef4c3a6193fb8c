"""Inference with the weak retrieval branch and the evaluation protocol:
recall at IoU thresholds (strict inequality) and mean IoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .model import BranchPipeline, forward_weak
from .synthdata import SyntheticSample, audit_zone

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


@dataclass
class Prediction:
    """Top retrieved moment for one sample, in seconds."""

    sample_id: int
    start_time: float
    end_time: float
    score: float

    def interval(self) -> tuple:
        return (self.start_time, self.end_time)


@dataclass
class MetricsReport:
    recall_at_1: dict          # IoU threshold -> fraction of hits
    miou: float
    sample_count: int


def temporal_iou(a: tuple, b: tuple) -> float:
    """Intersection over union of two closed intervals on the real line."""
    (a_s, a_e), (b_s, b_e) = a, b
    if a_s >= a_e or b_s >= b_e:
        raise DataError(f"degenerate interval in IoU: {a} vs {b}")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = max(a_e, b_e) - min(a_s, b_s)
    return inter / union


def infer_weak(pipeline: BranchPipeline, sample: SyntheticSample,
               window_sizes: Sequence[int], stride: int,
               sample_id: int = 0) -> Prediction:
    """Highest-scoring proposal, converted to seconds.

    Ties prefer the earliest start, then the shortest proposal. Scores are
    compared exactly: identical floats are ties, anything else is an order.
    """
    with ad.no_grad():
        out = forward_weak(pipeline, ad.Tensor(sample.clip_features),
                           ad.Tensor(sample.word_features),
                           window_sizes, stride, score_only=True)
    scores = out.proposal_scores.data[:, 0]
    best = None
    for k, p in enumerate(out.proposals):
        cand = (scores[k], p.start_clip, p.end_clip - p.start_clip)
        if best is None:
            best = cand
            continue
        s, st, ln = best
        if cand[0] > s or (cand[0] == s and (cand[1] < st or
                                             (cand[1] == st and cand[2] < ln))):
            best = cand
    score, start_clip, length = best
    sec_per_clip = sample.duration_seconds / sample.n_c
    return Prediction(sample_id=sample_id,
                      start_time=start_clip * sec_per_clip,
                      end_time=(start_clip + length) * sec_per_clip,
                      score=float(score))


def infer_split(pipeline: BranchPipeline, samples: Sequence[SyntheticSample],
                window_sizes: Sequence[int], stride: int) -> list:
    return [infer_weak(pipeline, s, window_sizes, stride, sample_id=i)
            for i, s in enumerate(samples)]


def ground_truth_seconds(samples: Sequence[SyntheticSample]) -> list:
    """(id, start, end) triples in seconds; label reads land in the eval zone."""
    out = []
    with audit_zone("eval"):
        for i, s in enumerate(samples):
            spc = s.duration_seconds / s.n_c
            out.append((i, s.gt_start * spc, s.gt_end * spc))
    return out


def evaluate(predictions: Sequence[Prediction], ground_truth: Sequence[tuple],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> MetricsReport:
    """R@1 per threshold (IoU strictly greater) and mean IoU over the set."""
    gt_by_id = {g[0]: (g[1], g[2]) for g in ground_truth}
    pred_ids = [p.sample_id for p in predictions]
    orphan_preds = sorted(set(pred_ids) - set(gt_by_id))
    orphan_gts = sorted(set(gt_by_id) - set(pred_ids))
    if orphan_preds or orphan_gts:
        raise DataError(f"prediction/ground-truth id mismatch: predictions "
                        f"without labels {orphan_preds}, labels without "
                        f"predictions {orphan_gts}")
    if len(pred_ids) != len(set(pred_ids)):
        raise DataError("duplicate prediction ids")
    ious = np.array([temporal_iou(p.interval(), gt_by_id[p.sample_id])
                     for p in predictions])
    recalls = {float(m): float(np.mean(ious > m)) for m in thresholds}
    return MetricsReport(recall_at_1=recalls, miou=float(ious.mean()),
                         sample_count=len(predictions))


def write_predictions_csv(path, predictions: Sequence[Prediction]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "start", "end", "score"])
        for p in predictions:
            w.writerow([p.sample_id, repr(p.start_time), repr(p.end_time),
                        repr(p.score)])


def write_metrics_csv(path, report: MetricsReport):
    cols = [f"R1_iou{m}".replace("0.", "0") for m in sorted(report.recall_at_1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["miou", "samples"])
        w.writerow([repr(report.recall_at_1[m]) for m in sorted(report.recall_at_1)]
                   + [repr(report.miou), report.sample_count])


def logistic_probe_accuracy(features_a: np.ndarray, features_b: np.ndarray,
                            seed: int = 0, train_fraction: float = 0.7,
                            steps: int = 400, lr: float = 0.5,
                            l2: float = 1e-3) -> float:
    """Held-out accuracy of a logistic-regression probe separating two frozen
    feature sets. High accuracy means the sets are linearly distinguishable;
    invariant features should drive this toward chance.

    Plain full-batch gradient descent on standardized inputs — the probe has
    to be self-contained so its capacity is identical in every comparison.
    """
    if features_a.ndim != 2 or features_b.ndim != 2:
        raise DataError("probe features must be 2-D (n, d)")
    if features_a.shape[1] != features_b.shape[1]:
        raise DataError(f"probe feature dims differ: {features_a.shape[1]} "
                        f"vs {features_b.shape[1]}")
    rng = np.random.default_rng([seed, 53])
    parts = {"train": [], "test": []}
    labels = {"train": [], "test": []}
    for label, feats in ((0.0, features_a), (1.0, features_b)):
        order = rng.permutation(len(feats))
        cut = int(round(train_fraction * len(feats)))
        if cut < 1 or cut >= len(feats):
            raise DataError("probe split leaves an empty side")
        parts["train"].append(feats[order[:cut]])
        labels["train"].append(np.full(cut, label))
        parts["test"].append(feats[order[cut:]])
        labels["test"].append(np.full(len(feats) - cut, label))
    x_tr = np.vstack(parts["train"]).astype(np.float64)
    y_tr = np.concatenate(labels["train"])
    x_te = np.vstack(parts["test"]).astype(np.float64)
    y_te = np.concatenate(labels["test"])
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0) + 1e-8
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd

    w = np.zeros(x_tr.shape[1])
    b = 0.0
    for _ in range(steps):
        z = x_tr @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y_tr
        w -= lr * (x_tr.T @ err / len(y_tr) + l2 * w)
        b -= lr * float(err.mean())
    pred = (x_te @ w + b) > 0.0
    return float(np.mean(pred == y_te))
