from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Parameter], state: AdamState) -> AdamState:
    """One Adam update with decoupled weight decay, in place on ``params``.

    Every parameter must carry a gradient (call ``zero_grad`` before the
    forward pass); a parameter that is frozen (``requires_grad`` false) must
    not be handed to the optimizer at all.
    """
    for name, p in params.items():
        if not p.requires_grad:
            raise FrozenParameterError(f"attempt to update frozen parameter {name!r}")
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise MissingGradientError(f"gradient shape {p.grad.shape} != parameter shape "
                                       f"{p.data.shape} for {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


class Adam:
    def __init__(self, params: dict[str, Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 1e-5,
                 epsilon: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1],
                               weight_decay=weight_decay, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
