"""Central finite-difference check of analytical gradients."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .tensor import Graph, Tensor


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-4,
    n_coords: int | None = 16,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Return the max relative error between backprop and central differences.

    ``f`` maps a tensor to a scalar tensor. ``x`` is promoted to float64. Only a
    random subset of ``n_coords`` coordinates is probed (all when None).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def evaluate(arr: np.ndarray) -> float:
        with Graph():
            val = f(Tensor(arr.copy(), dtype=np.float64))
            v = float(val.data)
        if not np.isfinite(v):
            raise ValueError("gradcheck: f(x) is not finite")
        return v

    evaluate(x0)
    with Graph() as g:
        xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
        out = f(xt)
        if out.size != 1:
            raise ValueError("gradcheck: f must return a scalar")
        g.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    rng = np.random.default_rng(seed)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        numeric = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
