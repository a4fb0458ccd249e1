"""Central finite-difference oracle for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import TensorNode


def grad_check(
    f: Callable[[], TensorNode],
    params: Sequence[TensorNode],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    skip: Callable[[TensorNode, tuple], bool] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values.  Pass
    ``max_entries`` to probe a random subset of each parameter's entries;
    ``skip(param, index)`` excludes entries (e.g. points at a kink).
    Parameters should hold float64 data.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        entries = np.arange(n)
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        for k in entries:
            idx = np.unravel_index(k, p.shape)
            if skip is not None and skip(p, idx):
                continue
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f().data)
            flat[k] = orig - eps
            down = float(f().data)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = float(ga[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
