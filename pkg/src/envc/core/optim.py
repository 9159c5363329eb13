"""Adam with bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(
    params: list[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: list[np.ndarray | None] | None = None,
) -> bool:
    """Apply one Adam update in place; return False if the step was skipped.

    Gradients default to each parameter's ``.grad``. Parameters without
    ``requires_grad`` are never touched. Moment buffers are keyed by position
    in ``params``.
    """
    if grads is None:
        grads = [p.grad for p in params]
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("adam: non-finite gradient at step %d, update skipped", state.step + 1)
            return False
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            continue
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return True
