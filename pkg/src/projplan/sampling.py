"""Projected DDPM/DDIM sampling, guided sampling, two-stage inference and ablation baselines."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .conditioning import ConditionSet, Projector, extract_plan
from .denoiser import Denoiser, denoise
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, ddpm_posterior

METHODS = ("ddpm", "ddim")
BASELINES = ("none", "deterministic", "noise")


class ProjectionContractError(AssertionError):
    """A sampler state had condition rows that differ from the ConditionSet."""


@dataclass
class SamplerConfig:
    method: str = "ddim"
    ddim_steps: int = 10
    eta: float = 0.0
    cfg_lambda: float | None = None
    baseline: str = "none"
    samples: int = 1
    seed: int = 0
    chunk: int = 512

    def validate(self, N: int | None = None) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.cfg_lambda is not None and self.cfg_lambda < -1:
            raise ValueError(f"guidance scale must be >= -1, got {self.cfg_lambda}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.samples < 1:
            raise ValueError("samples per query must be >= 1")
        if N is not None and self.method == "ddim" and not 1 <= self.ddim_steps <= N:
            raise ValueError(f"DDIM step count {self.ddim_steps} must be in [1, {N}]")


@dataclass
class SampleResult:
    plans: np.ndarray
    x0_hat: np.ndarray


def _task_actions(model: Denoiser, task_actions):
    return model.task_actions if task_actions is None else task_actions


def _predictor(model: Denoiser, cond: ConditionSet, projector: Projector, cfg_lambda: float | None, task_actions):
    """Returns predict(projected state, n) -> projected x0 estimate (guided if ``cfg_lambda`` is set)."""
    if cfg_lambda is None:
        return lambda xp, n: projector(denoise(model, xp, n))
    uncond = Projector.build(cond.unconditional(), model.layout, task_actions)
    lam = float(cfg_lambda)

    def guided(xp, n):
        x0_c = projector(denoise(model, xp, n))
        x0_u = uncond(denoise(model, uncond(xp), n))
        return ((1.0 + lam) * x0_c - lam * x0_u).astype(np.float32)

    return guided


def _check(projector: Projector, xp: np.ndarray) -> None:
    if not projector.conditions_hold(xp):
        raise ProjectionContractError("condition rows of the sampler state differ from the conditions")


def run_chain(model: Denoiser, cond: ConditionSet, sched: NoiseSchedule, scfg: SamplerConfig,
              rng: np.random.Generator, task_actions=None, monitor=None) -> SampleResult:
    """Sample one chain per row of ``cond``.

    ``monitor(iteration, n, projected_state)`` is called before every model
    evaluation.
    """
    scfg.validate(sched.N)
    layout = model.layout
    task_actions = _task_actions(model, task_actions)
    projector = Projector.build(cond, layout, task_actions)
    predict = _predictor(model, cond, projector, scfg.cfg_lambda, task_actions)
    shape = (cond.batch_size, layout.channels, cond.horizon)
    deterministic = scfg.baseline == "deterministic"
    x = np.zeros(shape, np.float32) if deterministic else rng.standard_normal(shape).astype(np.float32)

    def evaluate(it, n, state):
        xp = projector(state)
        _check(projector, xp)
        if monitor is not None:
            monitor(it, n, xp)
        return xp, predict(xp, n)

    if scfg.baseline == "noise":
        _, x0 = evaluate(0, sched.N, x)
    elif scfg.method == "ddpm":
        for it, n in enumerate(range(sched.N, 0, -1)):
            xp, x0 = evaluate(it, n, x)
            if n > 1:
                mu, var = ddpm_posterior(x0, xp, n, sched)
                if deterministic:
                    x = mu
                else:
                    x = (mu + np.sqrt(var) * rng.standard_normal(shape)).astype(np.float32)
    else:
        steps = ddim_timesteps(sched.N, scfg.ddim_steps)
        for it in range(len(steps) - 1, -1, -1):
            t_n = steps[it]
            t_prev = steps[it - 1] if it > 0 else 0
            xp, x0 = evaluate(len(steps) - 1 - it, t_n, x)
            if t_prev > 0:
                noise = None if deterministic or scfg.eta == 0 else rng.standard_normal(shape).astype(np.float32)
                x = ddim_step(x0, xp, t_n, t_prev, scfg.eta, sched, noise)
    x0 = projector(x0)
    plans = extract_plan(x0, layout, projector.allowed, fallback=x0)
    return SampleResult(plans, x0)


def sample_plan(model: Denoiser, cond: ConditionSet, sched: NoiseSchedule, scfg: SamplerConfig,
                rng: np.random.Generator, task_actions=None, monitor=None) -> SampleResult:
    """Conditional sampling (guided when ``scfg.cfg_lambda`` is set)."""
    return run_chain(model, cond, sched, scfg, rng, task_actions, monitor)


def sample_cfg(model: Denoiser, cond: ConditionSet, sched: NoiseSchedule, lam: float, scfg: SamplerConfig,
               rng: np.random.Generator, task_actions=None, monitor=None) -> SampleResult:
    """Guided sampling: x0 = (1 + lam) x0_cond - lam x0_uncond, both projected."""
    scfg = SamplerConfig(**{**scfg.__dict__, "cfg_lambda": lam})
    return run_chain(model, cond, sched, scfg, rng, task_actions, monitor)


@dataclass
class TwoStageResult:
    plans: np.ndarray
    endpoints: np.ndarray
    x0_hat: np.ndarray


def two_stage_plan(endpoint_model: Denoiser, interior_model: Denoiser, cond: ConditionSet,
                   sched: NoiseSchedule, scfg: SamplerConfig, rng: np.random.Generator, task_actions=None,
                   oracle_endpoints=None, endpoint_sched: NoiseSchedule | None = None) -> TwoStageResult:
    """Sample (a_1, a_T) with the 2-column model, then the full plan with those endpoints fixed.

    ``oracle_endpoints`` ([B, 2]) skips stage 1. Stage 2 always draws from
    the second of two spawned streams, so oracle and predicted runs share
    their stage-2 noise.
    """
    if cond.endpoints is not None:
        raise ValueError("two-stage planning expects conditions without endpoint actions")
    stage1_rng, stage2_rng = rng.spawn(2)
    if oracle_endpoints is None:
        ends_cond = ConditionSet(2, cond.obs_start, cond.obs_goal, cond.task)
        ends = run_chain(endpoint_model, ends_cond, endpoint_sched or sched, scfg, stage1_rng,
                         task_actions).plans
    else:
        ends = np.asarray(oracle_endpoints, dtype=np.int64).reshape(-1, 2)
    full = run_chain(interior_model, cond.with_endpoints(ends), sched, scfg, stage2_rng, task_actions)
    return TwoStageResult(full.plans, ends, full.x0_hat)


def sample_many(model: Denoiser, cond: ConditionSet, count: int, sched: NoiseSchedule, scfg: SamplerConfig,
                rng: np.random.Generator, task_actions=None) -> list[Counter]:
    """``count`` independent chains per query row; returns one plan multiset per query.

    Chains are rows of batched draws from ``rng``. The deterministic baseline
    runs one chain per query and assigns it multiplicity ``count`` since
    every chain would be identical.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    B = cond.batch_size
    out = [Counter() for _ in range(B)]
    if scfg.baseline == "deterministic":
        plans = run_chain(model, cond, sched, scfg, rng, task_actions).plans
        for q in range(B):
            out[q][tuple(int(a) for a in plans[q])] = count
        return out
    owners = np.repeat(np.arange(B), count)
    for start in range(0, len(owners), scfg.chunk):
        rows = owners[start:start + scfg.chunk]
        plans = run_chain(model, cond.take(rows), sched, scfg, rng, task_actions).plans
        for q, plan in zip(rows, plans):
            out[q][tuple(int(a) for a in plan)] += 1
    return out
