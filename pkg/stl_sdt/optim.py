"""Adam optimizer and gradient clipping for named parameter maps."""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from stl_sdt.autodiff import Array
from stl_sdt.errors import NumericalError


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First and second moment estimates plus the number of completed steps."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Raises:
        NumericalError: A gradient has non-finite entries; names the parameter.
    """
    for name in sorted(params):
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
    step = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_params, m, v = {}, {}, {}
    for name in sorted(params):
        g = grads[name]
        m[name] = b1 * state.m.get(name, np.zeros_like(g)) + (1.0 - b1) * g
        v[name] = b2 * state.v.get(name, np.zeros_like(g)) + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**step)
        v_hat = v[name] / (1.0 - b2**step)
        new_params[name] = params[name] - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_params, AdamState(m, v, step)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    total = 0.0
    for name in sorted(grads):
        total += float((grads[name] * grads[name]).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


class Adam:
    """Stateful wrapper applying :func:`adam_step` to :class:`Array` parameters."""

    def __init__(self, params: Mapping[str, Array], hyper: AdamHyper, grad_clip: float = 0.0) -> None:
        self.params = dict(params)
        self.hyper = hyper
        self.grad_clip = grad_clip
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the gradient norm."""
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in self.params.items()
        }
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter '{name}'")
        norm = clip_grad_norm(grads, self.grad_clip)
        values = {name: p.data for name, p in self.params.items()}
        updated, self.state = adam_step(values, grads, self.state, self.hyper)
        for name, p in self.params.items():
            p.data = updated[name]
        return norm
