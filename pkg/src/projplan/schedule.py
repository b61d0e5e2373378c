"""Noise schedules and closed-form diffusion quantities.

Index convention: arrays are indexed by diffusion step, ``alpha_bars[0] == 1``
and ``betas[0] == 0`` is a placeholder so that ``betas[n]`` is beta_n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "cosine"

    @property
    def N(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def to_dict(self) -> dict:
        return {"kind": self.kind, "N": self.N}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "cosine") != "cosine":
            raise ValueError(f"unsupported schedule kind {d['kind']!r}")
        return cosine_schedule(int(d["N"]))


def cosine_schedule(N: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if N < 1:
        raise ValueError(f"diffusion step count must be >= 1, got {N}")
    t = np.arange(N + 1, dtype=np.float64)
    f = np.cos(((t / N + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.concatenate([[0.0], np.minimum(1.0 - ratio, max_beta)])
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(betas, alpha_bars, "cosine")


def _check_step(n, sched: NoiseSchedule, low: int = 1) -> None:
    arr = np.asarray(n)
    if arr.size and (arr.min() < low or arr.max() > sched.N):
        raise ValueError(f"diffusion step {n} outside [{low}, {sched.N}]")


def q_sample(x0: np.ndarray, n, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_n) x0 + sqrt(1 - abar_n) eps; ``n`` is a scalar or one step per batch row."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    _check_step(n, sched)
    abar = sched.alpha_bars[np.asarray(n)]
    if abar.ndim:
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return out.astype(x0.dtype, copy=False)


def posterior_coefficients(n: int, sched: NoiseSchedule) -> tuple[float, float, float]:
    """(coef on x0_hat, coef on x_n, variance) of q(x_{n-1} | x_n, x0)."""
    ab, ab_prev, beta = sched.alpha_bars[n], sched.alpha_bars[n - 1], sched.betas[n]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    cn = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    var = (1.0 - ab_prev) / (1.0 - ab) * beta
    return c0, cn, var


def ddpm_posterior(x0_hat: np.ndarray, x_n: np.ndarray, n: int, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    if n < 2 or n > sched.N:
        raise ValueError(f"posterior needs 2 <= n <= {sched.N}, got {n}; the n = 1 step returns x0_hat")
    c0, cn, var = posterior_coefficients(n, sched)
    mu = (c0 * x0_hat + cn * x_n).astype(x_n.dtype, copy=False)
    return mu, var


def ddim_sigma(t_n: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab, ab_prev = sched.alpha_bars[t_n], sched.alpha_bars[t_prev]
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)


def ddim_step(x0_hat: np.ndarray, x_tn: np.ndarray, t_n: int, t_prev: int, eta: float,
              sched: NoiseSchedule, noise: np.ndarray | None) -> np.ndarray:
    """One DDIM update from timestep ``t_n`` to ``t_prev``; ``t_prev == 0`` is terminal."""
    if t_prev >= t_n:
        raise ValueError(f"DDIM needs t_prev < t_n, got {t_prev} >= {t_n}")
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    _check_step(t_n, sched)
    if t_prev == 0:
        return x0_hat
    ab, ab_prev = sched.alpha_bars[t_n], sched.alpha_bars[t_prev]
    sigma = ddim_sigma(t_n, t_prev, eta, sched)
    dir_var = 1.0 - ab_prev - sigma * sigma
    if dir_var < 0:
        if dir_var < -1e-12:
            raise ValueError(f"eta={eta} too large for timesteps {t_n}->{t_prev}: 1-abar-sigma^2={dir_var:.3g}")
        dir_var = 0.0
    eps_hat = (x_tn - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(dir_var) * eps_hat
    if sigma > 0 and noise is not None:
        out = out + sigma * noise
    return out.astype(x_tn.dtype, copy=False)


def ddim_timesteps(N: int, count: int) -> list[int]:
    """Uniformly spaced [t_1, ..., t_count] with t_count == N."""
    if not 1 <= count <= N:
        raise ValueError(f"DDIM step count must be in [1, {N}], got {count}")
    steps = [int(round(i * N / count)) for i in range(1, count + 1)]
    if len(set(steps)) != count:
        raise ValueError(f"non-unique DDIM timesteps for N={N}, count={count}")
    return steps
