"""Global-norm gradient clipping and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping was needed). The norm is
    accumulated in float64 regardless of the buffer precision.
    """
    sq = 0.0
    for g in grads:
        g64 = np.asarray(g, dtype=np.float64)
        sq += float(np.dot(g64.ravel(), g64.ravel()))
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= g.dtype.type(factor)
    return factor


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name or p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameter list")

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype)
