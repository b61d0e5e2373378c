from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: list[Parameter], grads: list[np.ndarray | None], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: list[str] | None = None) -> OptimizerState:
    """Bias-corrected ADAM update, in place on ``params`` and ``state``.

    A ``None`` gradient is treated as zero.
    """
    if len(state.first_moment) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.first_moment)} parameters, got {len(params)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} (index {i})")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient for parameter {label}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState.zeros_like(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.beta1, self.beta2, self.eps, names=self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
