import csv

import numpy as np
import pytest

from hybridvmr import autodiff as ad
from hybridvmr.autodiff import Tensor
from hybridvmr.errors import DataError
from hybridvmr.evaluation import (Prediction, evaluate, ground_truth_seconds,
                                  infer_split, infer_weak,
                                  logistic_probe_accuracy, temporal_iou,
                                  write_metrics_csv, write_predictions_csv)
from hybridvmr.model import ModelConfig, build_model, forward_weak
from hybridvmr.synthdata import (SyntheticSample, audit_zone,
                                 label_audit_counts, reset_label_audit)

CFG = ModelConfig(d=8, d_c=6, d_w=5, window_sizes=(2, 4), stride=2)


def _weak_pipeline(seed=0):
    model = build_model(CFG, sharing=frozenset(), with_full_branch=False,
                        rng=np.random.default_rng(seed))
    return model.weak


def _sample(rng, n_c, n_w, duration=None, gt=(0, 2)):
    return SyntheticSample(
        "source", rng.standard_normal((n_c, CFG.d_c)).astype(np.float32),
        rng.standard_normal((n_w, CFG.d_w)).astype(np.float32),
        gt[0], gt[1], duration if duration else float(n_c), 0)


# -- IoU -----------------------------------------------------------------


def test_iou_examples():
    assert temporal_iou((0.0, 2.0), (0.0, 2.0)) == 1.0
    assert temporal_iou((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert temporal_iou((0.0, 2.0), (1.0, 3.0)) == pytest.approx(1.0 / 3.0)
    assert temporal_iou((0.0, 4.0), (1.0, 2.0)) == pytest.approx(0.25)
    assert temporal_iou((1.0, 2.0), (0.0, 4.0)) == pytest.approx(0.25)


def test_iou_degenerate_interval():
    with pytest.raises(DataError):
        temporal_iou((1.0, 1.0), (0.0, 2.0))
    with pytest.raises(DataError):
        temporal_iou((0.0, 2.0), (3.0, 2.0))


# -- inference -----------------------------------------------------------


def _infer_oracle(pipeline, sample, window_sizes, stride):
    """Sorting-based argmax with the same tie rules as infer_weak."""
    with ad.no_grad():
        out = forward_weak(pipeline, Tensor(sample.clip_features),
                           Tensor(sample.word_features), window_sizes, stride,
                           score_only=True)
    scores = out.proposal_scores.data[:, 0]
    cands = [(-scores[k], p.start_clip, p.end_clip - p.start_clip)
             for k, p in enumerate(out.proposals)]
    neg, start, length = min(cands)
    spc = sample.duration_seconds / sample.n_c
    return start * spc, (start + length) * spc, -neg


def test_infer_weak_matches_oracle_on_100_random_configs():
    rng = np.random.default_rng(17)
    pipeline = _weak_pipeline()
    window_pool = (2, 3, 4, 6, 8)
    for _ in range(100):
        n_c = int(rng.integers(2, 25))
        n_w = int(rng.integers(2, 7))
        k = int(rng.integers(1, 4))
        windows = tuple(sorted(rng.choice(window_pool, size=k, replace=False)))
        stride = int(rng.integers(1, 5))
        sample = _sample(rng, n_c, n_w, duration=float(rng.uniform(5, 120)))
        got = infer_weak(pipeline, sample, windows, stride)
        start, end, score = _infer_oracle(pipeline, sample, windows, stride)
        assert (got.start_time, got.end_time) == (start, end)
        assert got.score == score


def test_infer_weak_tie_rule_earliest_then_shortest(rng):
    """All-zero fusion weights make every proposal score exactly 0.5."""
    pipeline = _weak_pipeline()
    for p in pipeline.fusion.parameters():
        p.tensor.data[...] = 0.0
    sample = _sample(rng, n_c=12, n_w=3, duration=24.0)
    pred = infer_weak(pipeline, sample, (4, 8), 4)
    assert pred.score == 0.5
    assert (pred.start_time, pred.end_time) == (0.0, 8.0)  # 4 clips * 2 s


def test_infer_weak_reads_no_labels(rng):
    pipeline = _weak_pipeline()
    sample = _sample(rng, 8, 3)
    reset_label_audit()
    infer_weak(pipeline, sample, CFG.window_sizes, CFG.stride)
    assert label_audit_counts() == {}


def test_infer_split_ids_are_positional(rng):
    pipeline = _weak_pipeline()
    samples = [_sample(rng, 8, 3), _sample(rng, 10, 4)]
    preds = infer_split(pipeline, samples, CFG.window_sizes, CFG.stride)
    assert [p.sample_id for p in preds] == [0, 1]


def test_ground_truth_seconds_scaling_and_audit(rng):
    sample = _sample(rng, n_c=10, n_w=3, duration=30.0, gt=(2, 6))
    reset_label_audit()
    triples = ground_truth_seconds([sample])
    assert triples == [(0, 6.0, 18.0)]
    assert label_audit_counts() == {("eval", "source"): 2}


# -- metrics -------------------------------------------------------------


def test_evaluate_hand_computed():
    preds = [Prediction(0, 0.0, 2.0, 0.9), Prediction(1, 4.0, 8.0, 0.8)]
    gt = [(0, 0.0, 2.0), (1, 0.0, 8.0)]  # IoUs: 1.0 and 0.5
    report = evaluate(preds, gt)
    assert report.miou == pytest.approx(0.75)
    assert report.sample_count == 2
    assert report.recall_at_1[0.3] == 1.0
    assert report.recall_at_1[0.5] == 0.5   # 0.5 is NOT > 0.5
    assert report.recall_at_1[0.7] == 0.5


def test_evaluate_threshold_strictly_greater():
    preds = [Prediction(0, 0.0, 1.0, 1.0)]
    gt = [(0, 0.0, 2.0)]  # IoU exactly 0.5
    report = evaluate(preds, gt)
    assert report.recall_at_1[0.5] == 0.0
    assert report.recall_at_1[0.3] == 1.0


def test_evaluate_id_mismatch_and_duplicates():
    with pytest.raises(DataError, match="mismatch"):
        evaluate([Prediction(0, 0.0, 1.0, 0.5)], [(1, 0.0, 1.0)])
    with pytest.raises(DataError, match="duplicate"):
        evaluate([Prediction(0, 0.0, 1.0, 0.5), Prediction(0, 0.0, 2.0, 0.4)],
                 [(0, 0.0, 1.0)])


def test_recall_monotone_in_threshold():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(3, 30))
        preds, gt = [], []
        for i in range(n):
            s, e = sorted(rng.uniform(0, 10, size=2))
            gs, ge = sorted(rng.uniform(0, 10, size=2))
            preds.append(Prediction(i, s, e + 0.1, 0.5))
            gt.append((i, gs, ge + 0.1))
        r = evaluate(preds, gt).recall_at_1
        values = [r[m] for m in sorted(r)]
        assert all(a >= b for a, b in zip(values, values[1:]))


# -- CSV output ----------------------------------------------------------


def test_predictions_csv_round_trips_floats_exactly(tmp_path, rng):
    preds = [Prediction(i, float(rng.uniform(0, 50)), float(rng.uniform(50, 99)),
                        float(rng.random())) for i in range(5)]
    path = tmp_path / "preds.csv"
    write_predictions_csv(path, preds)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    for p, row in zip(preds, rows):
        assert int(row["id"]) == p.sample_id
        assert float(row["start"]) == p.start_time
        assert float(row["end"]) == p.end_time
        assert float(row["score"]) == p.score


def test_metrics_csv_layout(tmp_path):
    report = evaluate([Prediction(0, 0.0, 2.0, 0.9)], [(0, 0.0, 2.0)])
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, report)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["R1_iou01", "R1_iou03", "R1_iou05", "R1_iou07",
                       "miou", "samples"]
    assert float(rows[1][4]) == 1.0
    assert rows[1][5] == "1"


# -- probe ---------------------------------------------------------------


def test_probe_separates_distinct_clusters():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((40, 4)) + 4.0
    b = rng.standard_normal((40, 4)) - 4.0
    assert logistic_probe_accuracy(a, b, seed=0) == 1.0


def test_probe_at_chance_on_identical_distributions():
    rng = np.random.default_rng(1)
    pool = rng.standard_normal((80, 6))
    acc = logistic_probe_accuracy(pool[:40], pool[40:], seed=0)
    assert 0.2 <= acc <= 0.8


def test_probe_deterministic():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((30, 5))
    b = rng.standard_normal((30, 5)) + 0.5
    assert logistic_probe_accuracy(a, b, seed=9) == \
        logistic_probe_accuracy(a, b, seed=9)


def test_probe_input_validation():
    ok = np.zeros((10, 3))
    with pytest.raises(DataError):
        logistic_probe_accuracy(np.zeros(10), ok)
    with pytest.raises(DataError):
        logistic_probe_accuracy(ok, np.zeros((10, 4)))
    with pytest.raises(DataError):
        logistic_probe_accuracy(np.zeros((1, 3)), ok)
