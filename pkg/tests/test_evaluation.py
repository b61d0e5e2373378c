from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from projplan.evaluation import (EvalReport, ProbMetrics, QueryGroup, evaluate_plans, format_predictions,
                                 group_prob_metrics, mean_accuracy, miou, prob_metrics, query_groups,
                                 random_baseline, read_predictions, retrieval_baseline, success_rate)

plans = st.lists(st.integers(0, 5), min_size=1, max_size=5)


def test_success_rate_examples():
    assert success_rate([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert success_rate([[1, 2, 3], [1, 2, 4]], [[1, 2, 3], [1, 2, 3]]) == 0.5
    with pytest.raises(ValueError):
        success_rate([[1, 2]], [[1, 2, 3]])
    with pytest.raises(ValueError):
        success_rate([[1, 2]], [])


def test_mean_accuracy_examples():
    assert mean_accuracy([[1, 2, 3]], [[1, 3, 3]]) == pytest.approx(2 / 3, abs=0)
    assert mean_accuracy([[4, 5]], [[4, 5]]) == 1.0
    assert mean_accuracy([[0, 0]], [[1, 1]]) == 0.0


def test_miou_examples():
    assert miou([[1, 2, 3]], [[1, 2, 4]]) == 0.5
    assert miou([[3, 2, 1]], [[1, 2, 3]]) == 1.0
    with pytest.raises(ValueError):
        miou([[1]], [[1]], batch_size=0)


def test_miou_batches_use_unions():
    preds = [[1, 2], [3, 4], [5, 6]]
    gts = [[1, 3], [2, 4], [7, 6]]
    assert miou(preds, gts, 1) == pytest.approx(np.mean([1 / 3, 1 / 3, 1 / 3]))
    # first group: {1,2,3,4} vs {1,2,3,4}; second: {5,6} vs {6,7}
    assert miou(preds, gts, 2) == pytest.approx(np.mean([1.0, 1 / 3]))


@given(T=st.integers(1, 6), seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_success_rate_bounded_by_mean_accuracy(T, seed, n):
    # reports are per horizon; across mixed lengths the position weighting of mAcc breaks the bound
    rng = np.random.default_rng(seed)
    preds, gts = rng.integers(0, 3, (n, T)), rng.integers(0, 3, (n, T))
    assert success_rate(preds, gts) <= mean_accuracy(preds, gts) <= 1.0


@given(pred=plans, gt=plans, seed=st.integers(0, 1000))
def test_miou_is_order_invariant(pred, gt, seed):
    gt = (gt * 5)[:len(pred)]
    rng = np.random.default_rng(seed)
    assert miou([rng.permutation(pred)], [rng.permutation(gt)]) == miou([pred], [gt])


def smoothed(counts, support):
    n = sum(counts.values())
    return {s: Fraction(counts.get(s, 0) + 1, n + len(support)) for s in support}


def oracle_metrics(gt, pred):
    support = sorted(set(gt) | set(pred))
    P, Q = smoothed(pred, support), smoothed(gt, support)
    n_gt, n_pred = sum(gt.values()), sum(pred.values())
    nll = -sum(c * math.log(P[s]) for s, c in gt.items()) / n_gt
    kl = sum(float(Q[s]) * math.log(Q[s] / P[s]) for s in support)
    prec = Fraction(sum(c for s, c in pred.items() if s in gt), n_pred)
    rec = Fraction(sum(c for s, c in gt.items() if s in pred), n_gt)
    return nll, kl, float(prec), float(rec)


def test_prob_metrics_against_fraction_oracle():
    gt = Counter({(1, 2, 3): 3, (1, 4, 3): 1})
    pred = Counter({(1, 2, 3): 10, (1, 5, 3): 5, (0, 0, 0): 1})
    got = group_prob_metrics(gt, pred)
    for a, b in zip((got.nll, got.kl, got.mode_prec, got.mode_rec), oracle_metrics(gt, pred)):
        assert a == pytest.approx(b, rel=1e-12)
    assert got.mode_prec == 10 / 16 and got.mode_rec == 3 / 4
    unweighted = group_prob_metrics(gt, pred, weighted=False)
    assert unweighted.mode_prec == 1 / 3 and unweighted.mode_rec == 1 / 2


def test_single_mode_fully_recovered():
    m = group_prob_metrics(Counter({(1, 2): 4}), Counter({(1, 2): 1500}))
    assert m.mode_prec == 1 and m.mode_rec == 1


def test_identical_distribution_has_zero_kl():
    gt = Counter({(1, 2, 3): 3, (1, 4, 3): 2})
    assert group_prob_metrics(gt, Counter(gt)).kl == 0


@pytest.mark.parametrize("scale", [3, 300])
def test_scaled_distribution_kl_below_smoothing_floor(scale):
    gt = Counter({(1, 2, 3): 3, (1, 4, 3): 2, (1, 5, 3): 1})
    pred = Counter({k: v * scale for k, v in gt.items()})
    n, U = sum(gt.values()), len(gt)
    # KL(Q||P) <= max log(Q/P); each ratio is exact from the counts and group sizes
    floor = max(math.log((c + 1) * (scale * n + U) / ((n + U) * (scale * c + 1))) for c in gt.values())
    kl = group_prob_metrics(gt, pred).kl
    assert 0 <= kl <= floor


def test_nll_non_negative_and_empty_samples_rejected():
    assert group_prob_metrics(Counter({(1,): 1}), Counter({(2,): 3})).nll >= 0
    with pytest.raises(ValueError):
        group_prob_metrics(Counter({(1,): 1}), Counter())
    with pytest.raises(ValueError):
        QueryGroup((0,), Counter())


def test_query_grouping_and_means():
    keys = [("a",), ("b",), ("a",), ("a",)]
    gts = [(1, 2), (3, 4), (1, 2), (1, 5)]
    groups = query_groups(keys, gts)
    assert [g.key for g in groups] == [("a",), ("b",)]
    assert groups[0].gt_modes == Counter({(1, 2): 2, (1, 5): 1}) and groups[0].query_index == 0
    assert groups[1].query_index == 1
    samples = [Counter({(1, 2): 5}), Counter({(3, 4): 1, (0, 0): 1})]
    m = prob_metrics(groups, samples)
    per = [group_prob_metrics(g.gt_modes, s) for g, s in zip(groups, samples)]
    assert m.mode_rec == pytest.approx((per[0].mode_rec + per[1].mode_rec) / 2)
    with pytest.raises(ValueError):
        prob_metrics(groups, samples[:1])


def test_random_baseline_accuracy_binomial():
    A, T, n = 7, 3, 10_000
    preds = random_baseline(n, T, A, np.random.default_rng(0))
    gts = np.random.default_rng(1).integers(0, A, (n, T))
    p = 1 / A
    se = math.sqrt(p * (1 - p) / (n * T))
    assert abs(mean_accuracy(preds, gts) - p) < 3 * se


def test_random_baseline_single_action_space():
    preds = random_baseline(5, 3, 1, np.random.default_rng(0))
    assert success_rate(preds, np.zeros((5, 3), int)) == 1.0
    limited = random_baseline(4, 3, 9, np.random.default_rng(0), tasks=[0, 1, 0, 1], task_actions=[[4], [2]])
    assert success_rate(limited, [[4] * 3, [2] * 3, [4] * 3, [2] * 3]) == 1.0


def test_retrieval_self_and_ties():
    feats = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    train_plans = [(1, 2, 3), (4, 5, 6), (7, 8, 9)]
    assert retrieval_baseline(feats, train_plans, feats[:2]) == [(1, 2, 3), (4, 5, 6)]
    assert retrieval_baseline(feats, train_plans, [[1.0, 1.0]]) == [(4, 5, 6)]
    mixed = [(1, 2), (4, 5, 6), (7, 8, 9)]
    assert retrieval_baseline(feats, mixed, [[0.0, 0.0]], query_horizons=[3]) == [(4, 5, 6)]
    with pytest.raises(ValueError):
        retrieval_baseline(feats, mixed, [[0.0, 0.0]], query_horizons=[5])
    with pytest.raises(ValueError):
        retrieval_baseline(np.zeros((0, 2)), [], [[0.0, 0.0]])


def test_report_round_trip_and_rendering():
    report = EvalReport(seeds=[0, 1])
    evaluate_plans(report, 3, [[1, 2, 3], [1, 2, 4]], [[1, 2, 3], [1, 2, 3]])
    report.add_prob(3, ProbMetrics(1.5, 0.2, 0.9, 0.8), 1500)
    text = report.to_text()
    assert "T3.SR = 50.00" in text and "T3.ModeRec = 80.00" in text and "T3.samples = 1500" in text
    back = EvalReport.from_text(text)
    assert back.to_dict() == report.to_dict()
    assert report.headline()["T3.SR"] == 50.0
    with pytest.raises(ValueError):
        report.add_horizon(4, 1.2, 0.5, 0.5, 1)


def test_prediction_file_round_trip(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("# header\n" + format_predictions([0, 1], [2, 3], [(1, 2, 3), (4, 5, 6)]))
    assert read_predictions(path) == [(0, 2, (1, 2, 3)), (1, 3, (4, 5, 6))]
    path.write_text("0\t1\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_predictions(path)
