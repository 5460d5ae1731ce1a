from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moments for one parameter array; zero-initialized, step counts updates."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, values: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(values, dtype=np.float64), np.zeros_like(values, dtype=np.float64))


def adam_update(values: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam step applied to ``values`` in place."""
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named arrays."""

    lr: float = 1e-3
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        for name, values in params.items():
            g = grads.get(name)
            if g is None:
                continue
            state = self.states.get(name)
            if state is None:
                state = self.states[name] = AdamState.zeros_like(values)
            adam_update(values, g, state, self.lr)
