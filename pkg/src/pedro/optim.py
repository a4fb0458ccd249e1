"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import TensorNode


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Bias-corrected Adam with weight decay applied directly to the weights.

    The optimizer keeps moments keyed by parameter identity; only the
    parameters registered at construction time are ever touched.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: list[TensorNode] = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameter passed to AdamW")
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for p in self.params:
            self.state.exp_avg[id(p)] = np.zeros_like(p.data)
            self.state.exp_avg_sq[id(p)] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = float(value)

    def owns(self, p: TensorNode) -> bool:
        return id(p) in self.state.exp_avg

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        st = self.state
        for p in self.params:
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name or p.shape} has no gradient")
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p in self.params:
            g = p.grad
            m = st.exp_avg[id(p)]
            v = st.exp_avg_sq[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.lr == 0.0:
                continue
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= (st.lr * update).astype(p.data.dtype, copy=False)


def adamw_step(params, opt: AdamW):
    """Apply one update; ``params`` must be exactly the optimizer's parameters."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("params do not match the optimizer's registered parameters")
    opt.step()


class LinearSchedule:
    """Linear warmup from 0 to ``peak`` then linear decay to 0."""

    def __init__(self, peak: float, total_steps: int, warmup_fraction: float = 0.06):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.peak = peak
        self.total = total_steps
        self.warmup = max(1, int(round(warmup_fraction * total_steps)))

    def __call__(self, step: int) -> float:
        # step is 0-based: the lr used for the (step+1)-th update
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        remaining = self.total - step
        return self.peak * max(0.0, remaining / max(1, self.total - self.warmup))
