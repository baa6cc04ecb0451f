"""Adam with bias correction on flat parameter vectors."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractViolation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr,
                         self.beta1, self.beta2, self.eps)


def adam_update(state, params, grads, sign="descent"):
    """One Adam step; returns ``(new_state, new_params)`` without mutating inputs.

    ``sign="ascent"`` moves along ``+grad`` (maximization).
    """
    values = getattr(params, "values", params)
    g = np.asarray(getattr(grads, "values", grads), dtype=np.float64)
    if g.shape != values.shape or state.m.shape != values.shape:
        raise ContractViolation("Adam state, parameters and gradients must share a shape")
    if sign not in ("ascent", "descent"):
        raise ContractViolation(f"sign must be 'ascent' or 'descent', got {sign!r}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_values = values + delta if sign == "ascent" else values - delta
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    if hasattr(params, "with_values"):
        return new_state, params.with_values(new_values)
    return new_state, new_values
