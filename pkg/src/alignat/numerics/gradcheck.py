"""Central finite-difference verification of the tape's gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_difference_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic grads of ``build_loss()`` against central differences.

    ``build_loss`` must rebuild the graph from the given parameter tensors on
    every call (graphs are single-use). Returns the worst relative error seen;
    tiny gradients degrade gracefully to an absolute comparison.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build_loss().item()
            flat[i] = orig - h
            f_minus = build_loss().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            a = 0.0 if an is None else float(an.reshape(-1)[i])
            err = abs(fd - a) / max(abs(fd), abs(a), 1e-3)
            worst = max(worst, err)
    return worst
