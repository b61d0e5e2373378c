"""Plan metrics, probabilistic metrics, Random/Retrieval baselines and evaluation reports."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


def _pairs(preds, gts) -> tuple[list[tuple], list[tuple]]:
    preds = [tuple(int(a) for a in p) for p in preds]
    gts = [tuple(int(a) for a in g) for g in gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth plans")
    for i, (p, g) in enumerate(zip(preds, gts)):
        if len(p) != len(g):
            raise ValueError(f"pair {i}: prediction length {len(p)} != ground-truth length {len(g)}")
    return preds, gts


def success_rate(preds, gts) -> float:
    preds, gts = _pairs(preds, gts)
    if not preds:
        raise ValueError("no plans to score")
    return sum(p == g for p, g in zip(preds, gts)) / len(preds)


def mean_accuracy(preds, gts) -> float:
    preds, gts = _pairs(preds, gts)
    hits = sum(a == b for p, g in zip(preds, gts) for a, b in zip(p, g))
    total = sum(len(g) for g in gts)
    if not total:
        raise ValueError("no plans to score")
    return hits / total


def miou(preds, gts, batch_size: int = 1) -> float:
    """Mean over consecutive groups of ``batch_size`` pairs of |P ∩ G| / |P ∪ G| on action sets.

    P and G are the unions of the group's predicted and ground-truth action
    sets. ``batch_size = 1`` scores every sequence on its own.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    preds, gts = _pairs(preds, gts)
    if not preds:
        raise ValueError("no plans to score")
    scores = []
    for start in range(0, len(preds), batch_size):
        P = set().union(*preds[start:start + batch_size])
        G = set().union(*gts[start:start + batch_size])
        scores.append(len(P & G) / len(P | G))
    return float(np.mean(scores))


@dataclass
class QueryGroup:
    key: tuple
    gt_modes: Counter
    query_index: int = 0

    def __post_init__(self):
        if not self.gt_modes:
            raise ValueError(f"query group {self.key} has no ground-truth plans")


def query_groups(keys, plans) -> list[QueryGroup]:
    """Group evaluation rows by key; ``query_index`` is the first row with that key."""
    modes: dict = {}
    first: dict = {}
    for i, (k, p) in enumerate(zip(keys, plans)):
        first.setdefault(k, i)
        modes.setdefault(k, Counter())[tuple(int(a) for a in p)] += 1
    return [QueryGroup(k, modes[k], first[k]) for k in modes]


@dataclass
class ProbMetrics:
    nll: float
    kl: float
    mode_prec: float
    mode_rec: float


def group_prob_metrics(gt: Counter, pred: Counter, weighted: bool = True) -> ProbMetrics:
    """Metrics for one query; both distributions are add-one smoothed over the union support."""
    n_pred = sum(pred.values())
    n_gt = sum(gt.values())
    if n_pred == 0:
        raise ValueError("empty sample multiset")
    support = set(gt) | set(pred)
    U = len(support)
    P = {s: (pred.get(s, 0) + 1) / (n_pred + U) for s in support}
    Q = {s: (gt.get(s, 0) + 1) / (n_gt + U) for s in support}
    if weighted:
        nll = -sum(c * math.log(P[s]) for s, c in gt.items()) / n_gt
        prec = sum(c for s, c in pred.items() if s in gt) / n_pred
        rec = sum(c for s, c in gt.items() if s in pred) / n_gt
    else:
        nll = -sum(math.log(P[s]) for s in gt) / len(gt)
        prec = sum(1 for s in pred if s in gt) / len(pred)
        rec = sum(1 for s in gt if s in pred) / len(gt)
    kl = sum(Q[s] * math.log(Q[s] / P[s]) for s in support)
    return ProbMetrics(nll, kl, prec, rec)


def prob_metrics(groups: list[QueryGroup], sampled: list[Counter], weighted: bool = True) -> ProbMetrics:
    """Means over groups of NLL, KL(Q || P), ModePrec and ModeRec."""
    if len(groups) != len(sampled):
        raise ValueError(f"{len(groups)} groups but {len(sampled)} sample multisets")
    if not groups:
        raise ValueError("no query groups")
    per = [group_prob_metrics(g.gt_modes, s, weighted) for g, s in zip(groups, sampled)]
    return ProbMetrics(*(float(np.mean([getattr(m, f) for m in per])) for f in ("nll", "kl", "mode_prec", "mode_rec")))


def random_baseline(n_queries: int, horizon: int, n_actions: int, rng: np.random.Generator, tasks=None,
                    task_actions=None) -> np.ndarray:
    """Uniform i.i.d. actions per position; restricted to each query's task actions when given."""
    if tasks is None or task_actions is None:
        return rng.integers(0, n_actions, size=(n_queries, horizon))
    out = np.empty((n_queries, horizon), dtype=np.int64)
    for i, k in enumerate(np.asarray(tasks)):
        space = np.asarray(task_actions[int(k)])
        out[i] = space[rng.integers(0, len(space), size=horizon)]
    return out


def retrieval_baseline(train_features: np.ndarray, train_plans: list, query_features: np.ndarray,
                       query_horizons=None) -> list[tuple[int, ...]]:
    """Plan of the nearest training record (Euclidean on concatenated [o_s, o_g]).

    Only records with the query's horizon are candidates; ties go to the
    lowest record index.
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    query_features = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    if len(train_features) == 0:
        raise ValueError("retrieval needs a non-empty training set")
    lengths = np.array([len(p) for p in train_plans])
    out = []
    for i, q in enumerate(query_features):
        cand = np.arange(len(train_plans))
        if query_horizons is not None:
            cand = cand[lengths == int(query_horizons[i])]
            if not len(cand):
                raise ValueError(f"no training record with horizon {query_horizons[i]}")
        d = ((train_features[cand] - q) ** 2).sum(axis=1)
        out.append(tuple(int(a) for a in train_plans[cand[int(np.argmin(d))]]))
    return out


@dataclass
class EvalReport:
    """Per-horizon plan metrics (fractions; rendered x100) plus optional probabilistic metrics."""

    horizons: dict = field(default_factory=dict)
    prob: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add_horizon(self, T: int, sr: float, macc: float, miou_value: float, count: int) -> None:
        for name, v in (("SR", sr), ("mAcc", macc), ("mIoU", miou_value)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        self.horizons[int(T)] = {"SR": sr, "mAcc": macc, "mIoU": miou_value, "count": int(count)}

    def add_prob(self, T: int, metrics: ProbMetrics, samples: int) -> None:
        self.prob[int(T)] = {"NLL": metrics.nll, "KL": metrics.kl, "ModePrec": metrics.mode_prec,
                             "ModeRec": metrics.mode_rec, "samples": int(samples)}

    def to_dict(self) -> dict:
        return {"horizons": {str(k): v for k, v in sorted(self.horizons.items())},
                "prob": {str(k): v for k, v in sorted(self.prob.items())},
                "seeds": list(self.seeds), "extra": self.extra}

    def headline(self) -> dict:
        return {f"T{T}.{m}": round(100 * v[m], 6) for T, v in sorted(self.horizons.items())
                for m in ("SR", "mAcc", "mIoU")}

    def to_text(self) -> str:
        lines = []
        for T, v in sorted(self.horizons.items()):
            for m in ("SR", "mAcc", "mIoU"):
                lines.append(f"T{T}.{m} = {100 * v[m]:.2f}")
            lines.append(f"T{T}.count = {v['count']}")
        for T, v in sorted(self.prob.items()):
            lines.append(f"T{T}.NLL = {v['NLL']:.4f}")
            lines.append(f"T{T}.KL = {v['KL']:.4f}")
            lines.append(f"T{T}.ModePrec = {100 * v['ModePrec']:.2f}")
            lines.append(f"T{T}.ModeRec = {100 * v['ModeRec']:.2f}")
            lines.append(f"T{T}.samples = {v['samples']}")
        if self.seeds:
            lines.append(f"seeds = {','.join(str(s) for s in self.seeds)}")
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k} = {v}")
        lines.append("--- json ---")
        lines.append(json.dumps(self.to_dict(), sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        blob = text.split("--- json ---", 1)[1]
        d = json.loads(blob)
        return cls({int(k): v for k, v in d["horizons"].items()}, {int(k): v for k, v in d["prob"].items()},
                   d["seeds"], d["extra"])


def evaluate_plans(report: EvalReport, T: int, preds, gts) -> EvalReport:
    report.add_horizon(T, success_rate(preds, gts), mean_accuracy(preds, gts), miou(preds, gts, 1), len(gts))
    return report


def read_predictions(path) -> list[tuple[int, int, tuple[int, ...]]]:
    """Parse ``query_id TAB task_id TAB a_1,...,a_T`` lines."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((int(parts[0]), int(parts[1]), tuple(int(a) for a in parts[2].split(","))))
    return rows


def format_predictions(query_ids, tasks, plans) -> str:
    return "".join(f"{q}\t{t}\t{','.join(str(int(a)) for a in p)}\n" for q, t, p in zip(query_ids, tasks, plans))
