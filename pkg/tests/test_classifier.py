from __future__ import annotations

import numpy as np
import pytest

from projplan.classifier import (TaskClassifier, accuracy, classify_task, cross_entropy, load_classifier,
                                 save_classifier, train_classifier)
from projplan.data import SyntheticConfig, generate_synthetic, group_by_horizon, split, windows_for
from projplan.numerics import Tensor
from projplan.numerics import checkpoint as ckpt


@pytest.fixture(scope="module")
def benchmark():
    corpus = generate_synthetic(SyntheticConfig(seed=0))
    train, test = split(corpus.videos, 0.7, seed=0)
    return corpus, group_by_horizon(windows_for(train, (3,)))[3], group_by_horizon(windows_for(test, (3,)))[3]


def centroid_oracle(train_x, train_y, x):
    best = []
    means = {k: train_x[train_y == k].mean(0) for k in sorted(set(train_y.tolist()))}
    for row in x:
        dists = {k: float(np.sum((row - m) ** 2)) for k, m in means.items()}
        best.append(min(dists, key=lambda k: (dists[k], k)))
    return np.array(best)


def features(arr):
    return np.concatenate([arr.obs_start, arr.obs_goal], axis=1).astype(np.float64)


def test_well_separated_tasks_are_classified(benchmark):
    corpus, tr, te = benchmark
    oracle = centroid_oracle(features(tr), tr.tasks, features(te))
    assert np.mean(oracle == te.tasks) >= 0.95
    clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 0)
    result = train_classifier(clf, tr.obs_start, tr.obs_goal, tr.tasks, epochs=10, seed=0,
                              heldout=(te.obs_start, te.obs_goal, te.tasks))
    assert result.heldout_accuracy >= 0.95
    assert result.train_accuracy >= 0.95


def test_first_epoch_reduces_loss(benchmark):
    corpus, tr, _ = benchmark
    clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 1)
    result = train_classifier(clf, tr.obs_start, tr.obs_goal, tr.tasks, epochs=1)
    logits, _ = classify_task(clf, tr.obs_start, tr.obs_goal)
    after = float(cross_entropy(Tensor(logits), tr.tasks).data)
    assert after < result.initial_loss
    assert len(result.epoch_losses) == 1


def test_single_task_dataset_is_perfect(benchmark):
    corpus, tr, _ = benchmark
    rows = tr.tasks == 2
    clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 0)
    result = train_classifier(clf, tr.obs_start[rows], tr.obs_goal[rows], tr.tasks[rows], epochs=3)
    assert result.train_accuracy == 1.0


def test_shuffled_labels_are_near_chance(benchmark):
    corpus, tr, te = benchmark
    rng = np.random.default_rng(0)
    y_tr, y_te = rng.permutation(tr.tasks), rng.permutation(te.tasks)
    clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 0)
    result = train_classifier(clf, tr.obs_start, tr.obs_goal, y_tr, epochs=10,
                              heldout=(te.obs_start, te.obs_goal, y_te))
    assert abs(result.heldout_accuracy - 1 / corpus.n_tasks) <= 0.05


def test_prediction_is_deterministic_and_argmax():
    clf = TaskClassifier(4, 5, 0)
    rng = np.random.default_rng(0)
    o_s, o_g = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    l1, p1 = classify_task(clf, o_s, o_g)
    l2, p2 = classify_task(clf, o_s, o_g)
    assert l1.tobytes() == l2.tobytes() and np.array_equal(p1, p2)
    assert l1.shape == (7, 5)
    np.testing.assert_array_equal(p1, l1.argmax(1))


def test_ties_go_to_lowest_index():
    clf = TaskClassifier(2, 4, 0)
    for p in clf.parameters():
        p.data[:] = 0
    _, pred = classify_task(clf, np.ones((3, 2)), np.ones((3, 2)))
    assert pred.tolist() == [0, 0, 0]


def test_dimension_mismatch_raises():
    clf = TaskClassifier(4, 3, 0)
    with pytest.raises(ValueError, match="observation dim"):
        classify_task(clf, np.zeros((1, 5)), np.zeros((1, 5)))


def test_empty_and_bad_labels_raise():
    clf = TaskClassifier(2, 3, 0)
    with pytest.raises(ValueError, match="empty"):
        train_classifier(clf, np.zeros((0, 2)), np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        train_classifier(clf, np.zeros((1, 2)), np.zeros((1, 2)), [3])


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    direct = -np.mean([logits[i, y] - np.log(np.exp(logits[i]).sum()) for i, y in enumerate(labels)])
    assert float(cross_entropy(Tensor(logits), labels).data) == pytest.approx(direct, rel=1e-6)


def test_training_is_deterministic(benchmark):
    corpus, tr, _ = benchmark
    runs = []
    for _ in range(2):
        clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 4)
        train_classifier(clf, tr.obs_start[:200], tr.obs_goal[:200], tr.tasks[:200], epochs=2, seed=9)
        runs.append(b"".join(p.data.tobytes() for p in clf.parameters()))
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tmp_path, benchmark):
    corpus, tr, _ = benchmark
    clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, 0, hidden=16)
    save_classifier(tmp_path / "c.ckpt", clf)
    back, meta = load_classifier(tmp_path / "c.ckpt")
    assert meta["kind"] == "task_classifier" and meta["hidden"] == 16
    assert accuracy(back, tr.obs_start, tr.obs_goal, tr.tasks) == accuracy(clf, tr.obs_start, tr.obs_goal, tr.tasks)
    ckpt.save(tmp_path / "other.ckpt", {"w": np.zeros(2)}, {"kind": "denoiser"})
    with pytest.raises(ckpt.CheckpointError):
        load_classifier(tmp_path / "other.ckpt")
