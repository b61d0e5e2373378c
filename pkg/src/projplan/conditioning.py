"""Condition-annotated plan arrays and the condition projection.

A plan array has shape [B, C, T]; every column is one plan position and the
channel axis stacks four blocks in a fixed order::

    [horizon one-hot | task one-hot | action logits | observation features]

The horizon block exists only with ``horizon_mode == "concat"`` and the task
block only with ``task_mode == "concat"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Tensor, ops

TASK_MODES = ("none", "concat", "mask")
HORIZON_MODES = ("none", "concat", "moe")


@dataclass(frozen=True)
class Layout:
    n_actions: int
    obs_dim: int
    n_tasks: int
    horizons: tuple[int, ...] = (3,)
    task_mode: str = "concat"
    horizon_mode: str = "none"

    def __post_init__(self):
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.horizon_mode not in HORIZON_MODES:
            raise ValueError(f"horizon_mode must be one of {HORIZON_MODES}, got {self.horizon_mode!r}")
        if not self.horizons or min(self.horizons) < 2:
            raise ValueError(f"horizons must be non-empty and >= 2, got {self.horizons}")
        object.__setattr__(self, "horizons", tuple(sorted(int(h) for h in self.horizons)))

    @property
    def d_h(self) -> int:
        return len(self.horizons) if self.horizon_mode == "concat" else 0

    @property
    def d_c(self) -> int:
        return self.n_tasks if self.task_mode == "concat" else 0

    @property
    def d_a(self) -> int:
        return self.n_actions

    @property
    def d_o(self) -> int:
        return self.obs_dim

    @property
    def channels(self) -> int:
        return self.d_h + self.d_c + self.d_a + self.d_o

    @property
    def h_slice(self) -> slice:
        return slice(0, self.d_h)

    @property
    def c_slice(self) -> slice:
        return slice(self.d_h, self.d_h + self.d_c)

    @property
    def a_slice(self) -> slice:
        start = self.d_h + self.d_c
        return slice(start, start + self.d_a)

    @property
    def o_slice(self) -> slice:
        start = self.d_h + self.d_c + self.d_a
        return slice(start, start + self.d_o)

    def horizon_index(self, T: int) -> int:
        if T not in self.horizons:
            raise ValueError(f"horizon {T} not in supported set {self.horizons}")
        return self.horizons.index(T)

    def to_dict(self) -> dict:
        return {"n_actions": self.n_actions, "obs_dim": self.obs_dim, "n_tasks": self.n_tasks,
                "horizons": list(self.horizons), "task_mode": self.task_mode,
                "horizon_mode": self.horizon_mode,
                "blocks": [["h", self.d_h], ["c", self.d_c], ["a", self.d_a], ["o", self.d_o]]}

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls(int(d["n_actions"]), int(d["obs_dim"]), int(d["n_tasks"]), tuple(d["horizons"]),
                   d["task_mode"], d["horizon_mode"])


@dataclass
class ConditionSet:
    """Conditions for a batch of B queries sharing one horizon.

    ``task`` holds task ids with -1 meaning "no task condition"; ``endpoints``
    holds (a_1, a_T) ids for two-stage interior prediction, -1 meaning absent.
    """

    horizon: int
    obs_start: np.ndarray
    obs_goal: np.ndarray
    task: np.ndarray
    endpoints: np.ndarray | None = None

    def __post_init__(self):
        self.obs_start = np.atleast_2d(np.asarray(self.obs_start, dtype=np.float32))
        self.obs_goal = np.atleast_2d(np.asarray(self.obs_goal, dtype=np.float32))
        self.task = np.atleast_1d(np.asarray(self.task, dtype=np.int64))
        if self.endpoints is not None:
            self.endpoints = np.atleast_2d(np.asarray(self.endpoints, dtype=np.int64))
        B = len(self.obs_start)
        if len(self.obs_goal) != B or len(self.task) != B:
            raise ValueError("ConditionSet fields disagree on batch size")
        if self.endpoints is not None and self.endpoints.shape != (B, 2):
            raise ValueError(f"endpoints must be [{B}, 2], got {self.endpoints.shape}")

    @classmethod
    def single(cls, obs_start, obs_goal, horizon: int, task: int | None = None,
               endpoints: tuple[int, int] | None = None) -> "ConditionSet":
        return cls(horizon, np.asarray(obs_start)[None], np.asarray(obs_goal)[None],
                   np.array([-1 if task is None else task]),
                   None if endpoints is None else np.asarray(endpoints)[None])

    @property
    def batch_size(self) -> int:
        return len(self.task)

    def take(self, idx) -> "ConditionSet":
        idx = np.atleast_1d(np.asarray(idx))
        return ConditionSet(self.horizon, self.obs_start[idx], self.obs_goal[idx], self.task[idx],
                            None if self.endpoints is None else self.endpoints[idx])

    def repeat(self, count: int) -> "ConditionSet":
        """Each query repeated ``count`` times consecutively."""
        return self.take(np.repeat(np.arange(self.batch_size), count))

    def with_endpoints(self, endpoints) -> "ConditionSet":
        return replace(self, endpoints=np.asarray(endpoints, dtype=np.int64).reshape(-1, 2))

    def with_horizon(self, horizon: int) -> "ConditionSet":
        return replace(self, horizon=horizon, endpoints=None)

    def unconditional(self, which=None) -> "ConditionSet":
        """Zero observations, drop task and endpoints (all rows, or rows where ``which`` is true)."""
        which = np.ones(self.batch_size, dtype=bool) if which is None else np.asarray(which, dtype=bool)
        obs_s, obs_g, task = self.obs_start.copy(), self.obs_goal.copy(), self.task.copy()
        obs_s[which] = 0.0
        obs_g[which] = 0.0
        task[which] = -1
        endpoints = None
        if self.endpoints is not None and not which.all():
            endpoints = self.endpoints.copy()
            endpoints[which] = -1
        return ConditionSet(self.horizon, obs_s, obs_g, task, endpoints)


def task_mask_matrix(task_actions, n_actions: int) -> np.ndarray:
    """[K, A] 0/1 matrix; row k marks the actions belonging to task k."""
    mask = np.zeros((len(task_actions), n_actions), dtype=np.float32)
    for k, acts in enumerate(task_actions):
        acts = list(acts)
        if acts and max(acts) >= n_actions:
            raise ValueError(f"task {k} references action {max(acts)} >= vocabulary size {n_actions}")
        mask[k, acts] = 1.0
    return mask


@dataclass
class Projector:
    """Precomputed projection for one ConditionSet.

    ``fixed`` marks entries overwritten with ``values``; free entries are
    multiplied by ``keep`` (1, or the 0/1 task mask inside the action block).
    """

    fixed: np.ndarray
    values: np.ndarray
    keep: np.ndarray
    allowed: np.ndarray | None = field(default=None)

    def __post_init__(self):
        # masked entries are written as +0 rather than x * 0, which can give -0
        self.overwrite = self.fixed | (self.keep == 0)

    @classmethod
    def build(cls, cond: ConditionSet, layout: Layout, task_actions=None) -> "Projector":
        B, T, C = cond.batch_size, cond.horizon, layout.channels
        layout.horizon_index(T)
        values = np.zeros((B, C, T), dtype=np.float32)
        fixed = np.zeros((B, C, T), dtype=bool)
        keep = np.ones((B, C, T), dtype=np.float32)
        if layout.d_h:
            values[:, layout.horizon_index(T), :] = 1.0
            fixed[:, layout.h_slice, :] = True
        has_task = cond.task >= 0
        if layout.d_c:
            rows = np.nonzero(has_task)[0]
            values[rows, layout.c_slice.start + cond.task[rows], :] = 1.0
            fixed[:, layout.c_slice, :] = True
        o = layout.o_slice
        values[:, o, 0] = cond.obs_start
        values[:, o, T - 1] = cond.obs_goal
        fixed[:, o, :] = True
        a = layout.a_slice
        allowed = None
        if layout.task_mode == "mask" and has_task.any():
            if task_actions is None:
                raise ValueError("task-mask conditioning needs the task -> action map")
            table = task_mask_matrix(task_actions, layout.n_actions)
            mask = np.ones((B, layout.d_a), dtype=np.float32)
            mask[has_task] = table[cond.task[has_task]]
            keep[:, a, :] = mask[:, :, None]
            allowed = mask > 0
        if cond.endpoints is not None:
            for col, which in ((0, 0), (T - 1, 1)):
                ids = cond.endpoints[:, which]
                rows = np.nonzero(ids >= 0)[0]
                fixed[rows, a, col] = True
                values[rows, a.start + ids[rows], col] = 1.0
        keep[fixed] = 0.0
        return cls(fixed, values, keep, allowed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.values.shape:
            raise ValueError(f"array shape {x.shape} does not match layout shape {self.values.shape}")
        return np.where(self.overwrite, self.values, x).astype(np.float32, copy=False)

    def apply_tensor(self, x: Tensor) -> Tensor:
        """Differentiable projection (used on model predictions during training)."""
        return ops.add(ops.mul(x, self.keep), self.values)

    def conditions_hold(self, x: np.ndarray) -> bool:
        return bool(np.array_equal(x[self.fixed], self.values[self.fixed]))


def project(x: np.ndarray, cond: ConditionSet, layout: Layout, task_actions=None) -> np.ndarray:
    return Projector.build(cond, layout, task_actions)(x)


def assemble_input(actions, cond: ConditionSet, layout: Layout, task_actions=None) -> np.ndarray:
    """Build x0: one-hot actions (id -1 gives a zero column) plus condition rows."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    B, T = actions.shape
    if T != cond.horizon or B != cond.batch_size:
        raise ValueError(f"actions shape {actions.shape} does not match conditions ({cond.batch_size}, {cond.horizon})")
    if actions.max(initial=-1) >= layout.n_actions:
        raise ValueError(f"action id {actions.max()} >= vocabulary size {layout.n_actions}")
    x = Projector.build(cond, layout, task_actions).values.copy()
    b, t = np.nonzero(actions >= 0)
    x[b, layout.a_slice.start + actions[b, t], t] = 1.0
    return x


def extract_blocks(x: np.ndarray, layout: Layout) -> dict[str, np.ndarray]:
    return {"h": x[:, layout.h_slice], "c": x[:, layout.c_slice], "a": x[:, layout.a_slice],
            "o": x[:, layout.o_slice]}


def extract_plan(x0_hat: np.ndarray, layout: Layout, allowed: np.ndarray | None = None,
                 fallback: np.ndarray | None = None) -> np.ndarray:
    """Per-position argmax over the action block, lowest index on ties.

    ``allowed`` ([B, A] bool) restricts the argmax to a task's actions; rows
    whose allowed set is empty use ``fallback`` (unmasked logits) instead.
    """
    x0_hat = np.asarray(x0_hat)
    if x0_hat.ndim == 2:
        x0_hat = x0_hat[None]
    logits = x0_hat[:, layout.a_slice, :].astype(np.float64)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        empty = ~allowed.any(axis=1)
        masked = np.where(allowed[:, :, None], logits, -np.inf)
        if empty.any():
            source = logits if fallback is None else np.asarray(fallback)[:, layout.a_slice, :]
            masked[empty] = source[empty]
        logits = masked
    return np.argmax(logits, axis=1)
