"""Task classifier: (o_s, o_g) -> task logits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Adam, Tensor, backward, no_grad, ops
from .numerics import checkpoint as ckpt
from .numerics.nn import MLP, Module


class TaskClassifier(Module):
    def __init__(self, obs_dim: int, n_tasks: int, rng: np.random.Generator | int = 0, hidden: int = 128,
                 layers: int = 2):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.obs_dim = obs_dim
        self.n_tasks = n_tasks
        self.hidden = hidden
        self.n_layers = layers
        self.mlp = MLP([2 * obs_dim] + [hidden] * layers + [n_tasks], rng, "mish")

    def forward(self, features) -> Tensor:
        return self.mlp(features)

    def metadata(self) -> dict:
        return {"kind": "task_classifier", "obs_dim": self.obs_dim, "n_tasks": self.n_tasks,
                "hidden": self.hidden, "layers": self.n_layers}


def _features(clf: TaskClassifier, obs_start, obs_goal) -> np.ndarray:
    obs_start = np.atleast_2d(np.asarray(obs_start, dtype=np.float32))
    obs_goal = np.atleast_2d(np.asarray(obs_goal, dtype=np.float32))
    if obs_start.shape[1] != clf.obs_dim or obs_goal.shape[1] != clf.obs_dim:
        raise ValueError(f"classifier expects observation dim {clf.obs_dim}, got "
                         f"{obs_start.shape[1]} and {obs_goal.shape[1]}")
    return np.concatenate([obs_start, obs_goal], axis=1)


def classify_task(clf: TaskClassifier, obs_start, obs_goal) -> tuple[np.ndarray, np.ndarray]:
    """Logits [B, K] and predicted ids (argmax, lowest index on ties)."""
    with no_grad():
        logits = clf(Tensor(_features(clf, obs_start, obs_goal))).data
    return logits, np.argmax(logits, axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.getitem(logp, (np.arange(len(labels)), labels))
    return ops.mul(ops.mean(picked), -1.0)


@dataclass
class ClassifierResult:
    train_accuracy: float
    heldout_accuracy: float | None
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def accuracy(clf: TaskClassifier, obs_start, obs_goal, tasks) -> float:
    return float(np.mean(classify_task(clf, obs_start, obs_goal)[1] == np.asarray(tasks)))


def train_classifier(clf: TaskClassifier, obs_start, obs_goal, tasks, epochs: int = 20, lr: float = 1e-3,
                     batch_size: int = 64, seed: int = 0, heldout=None) -> ClassifierResult:
    """Minibatch Adam on cross-entropy. ``heldout`` is an optional (obs_start, obs_goal, tasks) triple."""
    tasks = np.asarray(tasks, dtype=np.int64)
    if len(tasks) == 0:
        raise ValueError("cannot train the task classifier on an empty dataset")
    X = _features(clf, obs_start, obs_goal)
    if tasks.max() >= clf.n_tasks or tasks.min() < 0:
        raise ValueError(f"task labels must lie in [0, {clf.n_tasks})")
    rng = np.random.default_rng(seed)
    opt = Adam(clf.named_parameters())
    with no_grad():
        initial = float(cross_entropy(clf(Tensor(X)), tasks).item())
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = cross_entropy(clf(Tensor(X[idx])), tasks[idx])
            backward(loss, clf.parameters())
            opt.step(lr)
            total += float(loss.item()) * len(idx)
        losses.append(total / len(X))
    train_acc = accuracy(clf, X[:, :clf.obs_dim], X[:, clf.obs_dim:], tasks)
    held = accuracy(clf, *heldout) if heldout is not None else None
    return ClassifierResult(train_acc, held, initial, losses)


def save_classifier(path, clf: TaskClassifier, extra: dict | None = None) -> None:
    meta = clf.metadata()
    if extra:
        meta.update(extra)
    ckpt.save(path, clf.state_dict(), meta)


def load_classifier(path) -> tuple[TaskClassifier, dict]:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "task_classifier":
        raise ckpt.CheckpointError(f"{path} is not a task-classifier checkpoint")
    clf = TaskClassifier(meta["obs_dim"], meta["n_tasks"], 0, meta["hidden"], meta["layers"])
    clf.load_state_dict(arrays)
    return clf, meta

