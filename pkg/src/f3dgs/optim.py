"""Adam with bias correction over dicts of named numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "adam_step", "NumericalError"]


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> None:
    """One in-place Adam update of ``params``.

    ``lr`` is a float or a dict mapping parameter names to learning rates.
    Parameters missing from ``grads`` are left untouched (their moments are
    not advanced either). Non-finite gradients raise :class:`NumericalError`.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate == 0:
            continue
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
