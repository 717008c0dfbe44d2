"""Adam optimiser: a pure update rule plus a stateful wrapper over tensors."""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from engine.tensor import Tensor
from errors import ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Returns new parameter arrays and a new state; inputs are not modified.
    A parameter missing from ``grads`` is updated with a zero gradient.
    """
    t = state.t + 1
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = (value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype, copy=False)
        new_m[name] = m.astype(value.dtype, copy=False)
        new_v[name] = v.astype(value.dtype, copy=False)

    return new_params, replace(state, t=t, m=new_m, v=new_v)


class Adam:
    """Applies :func:`adam_step` to a fixed list of named tensors."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for _, tensor in self.params:
            tensor.zero_grad()

    def step(self) -> None:
        values = {name: tensor.data for name, tensor in self.params}
        grads = {name: tensor.grad for name, tensor in self.params if tensor.grad is not None}
        updated, self.state = adam_step(values, grads, self.state)
        for name, tensor in self.params:
            tensor.data = updated[name]
