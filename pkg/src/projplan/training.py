"""Diffusion training: corrupt, project, denoise, weighted loss, Adam step."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .conditioning import ConditionSet, Layout, Projector, assemble_input
from .data import PlanArrays
from .denoiser import Denoiser, build_denoiser
from .numerics import Adam, Tensor, backward, ops
from .schedule import NoiseSchedule, cosine_schedule, q_sample


class TrainingDivergence(FloatingPointError):
    """Non-finite loss; carries the step, the sampled diffusion steps and the largest activation."""

    def __init__(self, step: int, n_values: np.ndarray, max_activation: float, horizon: int):
        self.step = step
        self.n_values = np.asarray(n_values)
        self.max_activation = max_activation
        self.horizon = horizon
        super().__init__(f"non-finite loss at step {step} (horizon {horizon}): "
                         f"n values {self.n_values.tolist()}, max |activation| {max_activation:.3g}")


@dataclass
class TrainConfig:
    N: int = 200
    steps: int = 5000
    batch_size: int = 32
    warmup: int = 500
    lr: float = 5e-4
    milestones: tuple[int, ...] = ()
    decay: float = 0.5
    w: float = 10.0
    horizons: tuple[int, ...] = (3,)
    task_mode: str = "concat"
    horizon_mode: str = "none"
    cfg_dropout_p: float = 0.0
    variant: str = "unet3"
    scale: str = "desk"
    moe_routing: str = "direct"
    model: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.horizons = tuple(sorted(int(h) for h in self.horizons))
        self.validate()

    def validate(self) -> None:
        if self.w < 1:
            raise ValueError(f"endpoint weight w must be >= 1, got {self.w}")
        if not self.horizons:
            raise ValueError("horizons must be non-empty")
        if not 0 <= self.cfg_dropout_p < 1:
            raise ValueError(f"cfg_dropout_p must be in [0, 1), got {self.cfg_dropout_p}")
        if self.N < 1 or self.steps < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("N, batch_size must be >= 1 and steps, warmup >= 0")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("lr milestones must be increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# Full-scale presets reproduce the published recipes; desk presets fit a single CPU core.
PRESETS: dict[str, dict] = {
    "crosstask_base": dict(N=200, steps=12000, batch_size=256, warmup=4000, lr=8e-4, milestones=(10000,),
                           decay=0.5, variant="unet3", scale="full"),
    "crosstask_how": dict(N=200, steps=24000, batch_size=256, warmup=4000, lr=5e-4,
                          milestones=(10000, 16000, 22000), decay=0.5, variant="unet3", scale="full"),
    "crosstask_how_joint": dict(N=200, steps=12000, batch_size=256, warmup=4000, lr=5e-4,
                                milestones=(10000, 16000, 22000), decay=0.5, variant="unet3", scale="full",
                                horizons=(3, 4, 5, 6), horizon_mode="concat"),
    "niv": dict(N=50, steps=6500, batch_size=256, warmup=4500, lr=3e-4, milestones=(6000,), decay=0.5,
                variant="unet3", scale="full"),
    "coin": dict(N=200, steps=14000, batch_size=256, warmup=4000, lr=1e-4, milestones=(), decay=0.5,
                 variant="unet_attn2", scale="full", task_mode="mask"),
    "desk": dict(N=200, steps=5000, batch_size=32, warmup=500, lr=5e-4, milestones=(3500,), decay=0.5,
                 variant="unet3", scale="desk"),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to the peak over ``warmup`` steps, then x``decay`` at each milestone."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    passed = sum(1 for m in cfg.milestones if step >= m)
    return cfg.lr * cfg.decay ** passed


def cfg_dropout(cond: ConditionSet, p: float, rng: np.random.Generator) -> tuple[ConditionSet, np.ndarray]:
    """Per row, with probability ``p`` replace the conditions by the unconditional variant."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    dropped = rng.random(cond.batch_size) < p
    if not dropped.any():
        return cond, dropped
    return cond.unconditional(dropped), dropped


def weight_matrix(layout: Layout, horizon: int, w: float) -> np.ndarray:
    """[C, T] loss multipliers: w at a_1 and a_T, 1 on interior actions, 0 on condition rows."""
    W = np.zeros((layout.channels, horizon), dtype=np.float32)
    a = layout.a_slice
    W[a, :] = 1.0
    W[a, 0] = w
    W[a, horizon - 1] = w
    return W


def make_layout(cfg: TrainConfig, n_actions: int, obs_dim: int, n_tasks: int) -> Layout:
    return Layout(n_actions, obs_dim, n_tasks, cfg.horizons, cfg.task_mode, cfg.horizon_mode)


def make_model(cfg: TrainConfig, layout: Layout, task_actions=None) -> Denoiser:
    rng = np.random.default_rng([cfg.seed, 1])
    return build_denoiser(cfg.variant, layout, rng, scale=cfg.scale, moe_routing=cfg.moe_routing,
                          task_actions=task_actions if layout.task_mode == "mask" else None, **cfg.model)


@dataclass
class Batch:
    x0: np.ndarray
    cond: ConditionSet
    projector: Projector


def draw_batch(data: PlanArrays, layout: Layout, cfg: TrainConfig, rng: np.random.Generator,
               task_actions=None, endpoints: bool = False) -> Batch:
    idx = rng.integers(0, len(data), size=cfg.batch_size)
    cond = data.conditions(idx, endpoints=endpoints)
    cond, _ = cfg_dropout(cond, cfg.cfg_dropout_p, rng)
    x0 = assemble_input(data.actions[idx], cond, layout, task_actions)
    return Batch(x0, cond, Projector.build(cond, layout, task_actions))


def weighted_loss(model: Denoiser, batch: Batch, sched: NoiseSchedule, W: np.ndarray, rng: np.random.Generator,
                  step: int = 0):
    """Forward pass of one training step; returns (loss tensor, n values, raw prediction)."""
    x0 = batch.x0
    B = x0.shape[0]
    n = rng.integers(1, sched.N + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_n = q_sample(x0, n, eps, sched).astype(np.float32)
    dtype = model.parameters()[0].dtype
    pred = model(Tensor(batch.projector(x_n).astype(dtype)), n)
    residual = ops.mul(ops.sub(Tensor(x0.astype(dtype)), batch.projector.apply_tensor(pred)), W.astype(dtype))
    loss = ops.mul(ops.sum(ops.square(residual), dtype=np.float64), 1.0 / B)
    value = float(loss.item())
    if not np.isfinite(value):
        raise TrainingDivergence(step, n, float(np.max(np.abs(pred.data))), x0.shape[2])
    return loss, n, pred


@dataclass
class TrainResult:
    losses: list[float]
    seconds: float
    steps: int


class Trainer:
    """Owns the model, optimizer, schedule and rng stream for one training run."""

    def __init__(self, model: Denoiser, cfg: TrainConfig, task_actions=None, endpoints: bool = False):
        self.model = model
        self.cfg = cfg
        self.layout = model.layout
        self.sched = cosine_schedule(cfg.N)
        self.task_actions = task_actions
        self.endpoints = endpoints
        self.opt = Adam(model.named_parameters())
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.step = 0
        self.losses: list[float] = []

    def train_step(self, datasets: dict[int, PlanArrays]) -> float:
        """One global step: one sub-batch per horizon, gradients accumulated, one Adam update."""
        self.opt.zero_grad()
        total = 0.0
        for T in self.cfg.horizons:
            batch = draw_batch(datasets[T], self.layout, self.cfg, self.rng, self.task_actions, self.endpoints)
            W = weight_matrix(self.layout, T, self.cfg.w)
            loss, _, _ = weighted_loss(self.model, batch, self.sched, W, self.rng, self.step)
            backward(loss, self.model.parameters())
            total += float(loss.item())
        self.opt.step(lr_at(self.step + 1, self.cfg))
        self.step += 1
        self.losses.append(total)
        return total

    def fit(self, datasets: dict[int, PlanArrays], steps: int | None = None, log=None) -> TrainResult:
        missing = [T for T in self.cfg.horizons if T not in datasets or len(datasets[T]) == 0]
        if missing:
            raise ValueError(f"no training data for horizon(s) {missing}")
        steps = self.cfg.steps if steps is None else steps
        t0 = time.perf_counter()
        for _ in range(steps):
            loss = self.train_step(datasets)
            if log is not None:
                log(self.step, loss)
        return TrainResult(list(self.losses), time.perf_counter() - t0, self.step)


def train(model: Denoiser, data: PlanArrays, cfg: TrainConfig, task_actions=None, log=None) -> TrainResult:
    """Single-horizon training."""
    if cfg.horizons != (data.horizon,):
        cfg = replace(cfg, horizons=(data.horizon,))
    return Trainer(model, cfg, task_actions).fit({data.horizon: data}, log=log)


def joint_train(model: Denoiser, datasets: dict[int, PlanArrays], cfg: TrainConfig, task_actions=None,
                log=None) -> TrainResult:
    """Mixed-horizon training of one model."""
    return Trainer(model, cfg, task_actions).fit(datasets, log=log)


def train_interior(model: Denoiser, data: PlanArrays, cfg: TrainConfig, task_actions=None,
                   log=None) -> TrainResult:
    """Train a model whose a_1 and a_T are conditions (ground-truth endpoints)."""
    if cfg.horizons != (data.horizon,):
        cfg = replace(cfg, horizons=(data.horizon,))
    return Trainer(model, cfg, task_actions, endpoints=True).fit({data.horizon: data}, log=log)


def endpoint_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, horizons=(2,), horizon_mode="none" if cfg.horizon_mode == "concat" else cfg.horizon_mode)


def train_endpoint_model(data: PlanArrays, cfg: TrainConfig, n_actions: int, obs_dim: int, n_tasks: int,
                         task_actions=None, log=None) -> tuple[Denoiser, TrainResult]:
    """Diffusion model over 2-column plans (a_1, a_T) with the same observations."""
    if data.horizon < 2:
        raise ValueError("endpoint training needs records with T >= 2")
    ecfg = endpoint_config(cfg)
    view = data.endpoint_view()
    layout = make_layout(ecfg, n_actions, obs_dim, n_tasks)
    model = make_model(ecfg, layout, task_actions)
    return model, Trainer(model, ecfg, task_actions).fit({2: view}, log=log)
