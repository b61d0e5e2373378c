"""Synthetic procedural-task corpora, window extraction, splitting and dataset files.

Each task owns a subset of the global action vocabulary and a sparse Markov
chain over it. A video is a walk through its task's chain. Observations at
action boundaries are fixed per-action embeddings (separate vectors for the
start and the end of an action) plus a per-task offset plus Gaussian noise.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditionSet

DATA_MAGIC = b"PDPPDATA"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_tasks: int = 6
    n_actions: int = 24
    subset_size: int = 6
    concentration: float = 1.0
    branching: int | None = None
    obs_dim: int = 32
    obs_noise: float = 0.1
    task_offset: float = 0.5
    videos_per_task: int = 60
    min_actions: int = 5
    max_actions: int = 9
    seed: int = 0

    def validate(self) -> None:
        if self.subset_size > self.n_actions:
            raise ValueError(f"subset size {self.subset_size} exceeds action vocabulary {self.n_actions}")
        if self.subset_size < 2:
            raise ValueError("each task needs at least 2 actions")
        if self.branching is not None and not 1 <= self.branching <= self.subset_size - 1:
            raise ValueError(f"branching must be in [1, {self.subset_size - 1}], got {self.branching}")
        if self.obs_noise < 0:
            raise ValueError("observation noise must be >= 0")
        if not 1 <= self.min_actions <= self.max_actions:
            raise ValueError("need 1 <= min_actions <= max_actions")
        if self.concentration <= 0:
            raise ValueError("Dirichlet concentration must be > 0")


@dataclass
class Video:
    video_id: int
    task: int
    actions: np.ndarray
    obs_start: np.ndarray
    obs_end: np.ndarray


@dataclass
class PlanRecord:
    task: int
    actions: tuple[int, ...]
    obs_start: np.ndarray
    obs_goal: np.ndarray
    video: int = -1

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def key(self) -> tuple:
        """Discrete (task, start action, goal action, horizon) query key."""
        return (self.task, self.actions[0], self.actions[-1], len(self.actions))


@dataclass
class Corpus:
    config: SyntheticConfig
    task_actions: list[list[int]]
    transitions: list[np.ndarray]
    videos: list[Video]
    start_embeddings: np.ndarray
    end_embeddings: np.ndarray
    task_embeddings: np.ndarray

    @property
    def n_tasks(self) -> int:
        return len(self.task_actions)

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def successors(self, task: int, action: int) -> list[int]:
        subset = self.task_actions[task]
        i = subset.index(action)
        return [subset[j] for j in np.nonzero(self.transitions[task][i] > 0)[0]]

    def reachable_plans(self, task: int, first: int, last: int, horizon: int) -> set[tuple[int, ...]]:
        """All length-``horizon`` walks from ``first`` to ``last`` with non-zero probability."""
        if first not in self.task_actions[task] or last not in self.task_actions[task]:
            return set()
        found: set[tuple[int, ...]] = set()

        def walk(path):
            if len(path) == horizon:
                if path[-1] == last:
                    found.add(tuple(path))
                return
            for nxt in self.successors(task, path[-1]):
                walk(path + [nxt])

        walk([first])
        return found

    def metadata(self) -> dict:
        return {"n_tasks": self.n_tasks, "n_actions": self.n_actions, "obs_dim": self.obs_dim,
                "task_actions": self.task_actions, "synthetic_config": asdict(self.config)}


def _unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(cfg: SyntheticConfig) -> Corpus:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    start_emb = _unit_vectors(rng, cfg.n_actions, cfg.obs_dim)
    end_emb = _unit_vectors(rng, cfg.n_actions, cfg.obs_dim)
    task_emb = cfg.task_offset * _unit_vectors(rng, cfg.n_tasks, cfg.obs_dim)
    task_actions, transitions = [], []
    m = cfg.subset_size
    for _ in range(cfg.n_tasks):
        subset = sorted(int(a) for a in rng.choice(cfg.n_actions, size=m, replace=False))
        P = np.zeros((m, m))
        for i in range(m):
            others = [j for j in range(m) if j != i]
            k = len(others) if cfg.branching is None else cfg.branching
            succ = sorted(rng.choice(others, size=k, replace=False))
            P[i, succ] = rng.dirichlet(np.full(k, cfg.concentration))
        task_actions.append(subset)
        transitions.append(P)
    videos = []
    for task in range(cfg.n_tasks):
        subset, P = task_actions[task], transitions[task]
        for _ in range(cfg.videos_per_task):
            n = int(rng.integers(cfg.min_actions, cfg.max_actions + 1))
            state = int(rng.integers(m))
            states = [state]
            for _ in range(n - 1):
                state = int(rng.choice(m, p=P[state]))
                states.append(state)
            actions = np.array([subset[s] for s in states], dtype=np.int64)
            noise_s = rng.standard_normal((n, cfg.obs_dim)) * cfg.obs_noise
            noise_e = rng.standard_normal((n, cfg.obs_dim)) * cfg.obs_noise
            obs_s = (start_emb[actions] + task_emb[task] + noise_s).astype(np.float32)
            obs_e = (end_emb[actions] + task_emb[task] + noise_e).astype(np.float32)
            videos.append(Video(len(videos), task, actions, obs_s, obs_e))
    return Corpus(cfg, task_actions, transitions, videos, start_emb, end_emb, task_emb)


def extract_windows(video: Video, horizon: int) -> list[PlanRecord]:
    """Every length-``horizon`` window: o_s = start of its first action, o_g = end of its last."""
    n = len(video.actions)
    out = []
    for i in range(n - horizon + 1):
        j = i + horizon - 1
        out.append(PlanRecord(video.task, tuple(int(a) for a in video.actions[i:j + 1]),
                              video.obs_start[i], video.obs_end[j], video.video_id))
    return out


def windows_for(videos, horizons) -> list[PlanRecord]:
    return [r for T in horizons for v in videos for r in extract_windows(v, T)]


def split(videos: list, ratio: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Video-level split: all windows of a video land on the same side."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(videos))
    n_train = int(round(ratio * len(videos)))
    train = [videos[i] for i in sorted(order[:n_train])]
    test = [videos[i] for i in sorted(order[n_train:])]
    return train, test


# -- dataset files ------------------------------------------------------------------------

def dumps_records(records: list[PlanRecord], metadata: dict) -> bytes:
    d_o = int(metadata["obs_dim"])
    meta = dict(metadata)
    meta["record_videos"] = [int(r.video) for r in records]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<II", DATA_VERSION, len(blob)))
    buf.write(blob)
    for r in records:
        if len(r.obs_start) != d_o or len(r.obs_goal) != d_o:
            raise ValueError(f"record observation dim != {d_o}")
        T = len(r.actions)
        buf.write(struct.pack(f"<II{T}I", r.task, T, *r.actions))
        buf.write(np.concatenate([r.obs_start, r.obs_goal]).astype("<f4").tobytes())
    return buf.getvalue()


def loads_records(blob: bytes) -> tuple[list[PlanRecord], dict]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DatasetFormatError(f"truncated {what} at byte offset {pos}: need {n} bytes, "
                                     f"{len(blob) - pos} remain")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(8, "header") != DATA_MAGIC:
        raise DatasetFormatError("bad magic at byte offset 0: not a dataset file")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at byte offset 8")
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    d_o = int(meta["obs_dim"])
    videos = meta.get("record_videos") or []
    records = []
    while pos < len(blob):
        start = pos
        task, T = struct.unpack("<II", take(8, f"record at {start}"))
        actions = struct.unpack(f"<{T}I", take(4 * T, f"record at {start}"))
        obs = np.frombuffer(take(8 * d_o, f"record at {start}"), dtype="<f4").astype(np.float32)
        vid = videos[len(records)] if len(records) < len(videos) else -1
        records.append(PlanRecord(task, tuple(actions), obs[:d_o].copy(), obs[d_o:].copy(), vid))
    return records, meta


def write_records(path, records: list[PlanRecord], metadata: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_records(records, metadata))
    tmp.replace(path)


def read_records(path) -> tuple[list[PlanRecord], dict]:
    return loads_records(Path(path).read_bytes())


# -- array views used by training and evaluation -------------------------------------------

@dataclass
class PlanArrays:
    """Column-stacked records that share one horizon."""

    horizon: int
    actions: np.ndarray
    obs_start: np.ndarray
    obs_goal: np.ndarray
    tasks: np.ndarray
    keys: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[PlanRecord], horizon: int) -> "PlanArrays":
        rs = [r for r in records if r.horizon == horizon]
        if not rs:
            raise ValueError(f"no records with horizon {horizon}")
        return cls(horizon, np.array([r.actions for r in rs], dtype=np.int64),
                   np.stack([r.obs_start for r in rs]).astype(np.float32),
                   np.stack([r.obs_goal for r in rs]).astype(np.float32),
                   np.array([r.task for r in rs], dtype=np.int64), [r.key for r in rs])

    def __len__(self) -> int:
        return len(self.actions)

    def endpoint_view(self) -> "PlanArrays":
        """Same queries with the plan reduced to (a_1, a_T)."""
        return PlanArrays(2, self.actions[:, [0, -1]].copy(), self.obs_start, self.obs_goal, self.tasks,
                          [(k[0], k[1], k[2], 2) for k in self.keys])

    def conditions(self, idx=None, task=None, vpa: bool = False, endpoints: bool = False) -> ConditionSet:
        """ConditionSet for rows ``idx``; ``task`` overrides the ground-truth task ids."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        tasks = self.tasks[idx] if task is None else np.asarray(task)
        goal = np.zeros_like(self.obs_goal[idx]) if vpa else self.obs_goal[idx]
        ep = self.actions[idx][:, [0, -1]] if endpoints else None
        return ConditionSet(self.horizon, self.obs_start[idx], goal, tasks, ep)


def group_by_horizon(records: list[PlanRecord]) -> dict[int, PlanArrays]:
    return {T: PlanArrays.from_records(records, T) for T in sorted({r.horizon for r in records})}
