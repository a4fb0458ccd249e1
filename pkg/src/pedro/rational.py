"""Learnable rational activations and fixed fallbacks.

``R(x) = (a_0 + a_1 x + ... + a_m x^m) / (1 + |b_1 x + ... + b_n x^n|)``

The denominator is at least one, so R has no poles on the real line.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamW
from .tensor import TensorNode

log = logging.getLogger(__name__)

FIXED_KINDS = ("relu", "gelu")


class RationalActivation:
    trainable = True

    def __init__(self, a, b, abs_of_sum: bool = True):
        self.a = a if isinstance(a, TensorNode) else T.tensor(a, requires_grad=True)
        self.b = b if isinstance(b, TensorNode) else T.tensor(b, requires_grad=True)
        if self.a.ndim != 1 or self.b.ndim != 1 or self.a.shape[0] < 1 or self.b.shape[0] < 1:
            raise ValueError("rational coefficients must be non-empty vectors")
        self.abs_of_sum = abs_of_sum

    @property
    def order(self) -> tuple[int, int]:
        return self.a.shape[0] - 1, self.b.shape[0]

    @property
    def kind(self) -> str:
        return "rational"

    def __call__(self, x) -> TensorNode:
        return T.rational(x, self.a, self.b, self.abs_of_sum)

    def parameters(self) -> list[TensorNode]:
        return [self.a, self.b]

    def copy(self) -> "RationalActivation":
        return RationalActivation(self.a.data.copy(), self.b.data.copy(), self.abs_of_sum)

    def numpy_eval(self, x) -> np.ndarray:
        with T.no_grad():
            return self(T.tensor(np.asarray(x, dtype=self.a.dtype))).data

    @classmethod
    def identity(cls, m: int = 6, n: int = 5, abs_of_sum: bool = True) -> "RationalActivation":
        a = np.zeros(m + 1)
        a[1] = 1.0
        return cls(a, np.zeros(n), abs_of_sum)


def rational_eval(x, act: RationalActivation) -> TensorNode:
    return act(x)


@dataclass(frozen=True)
class FixedActivation:
    kind: str
    trainable = False

    def __post_init__(self):
        if self.kind not in FIXED_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; expected one of {FIXED_KINDS}")

    def __call__(self, x) -> TensorNode:
        return T.relu(x) if self.kind == "relu" else T.gelu(x)

    def parameters(self) -> list[TensorNode]:
        return []

    def copy(self) -> "FixedActivation":
        return self


def fixed_activation(kind: str) -> FixedActivation:
    return FixedActivation(kind)


@dataclass
class FitResult:
    activation: RationalActivation
    mse: float
    max_abs_error: float
    steps: int


def fit_to_reference(reference, grid=(-3.0, 3.0, 601), m: int = 6, n: int = 5,
                     steps: int = 20000, lr: float = 2e-2, abs_of_sum: bool = True,
                     tol: float = 1e-12, seed: int = 0) -> FitResult:
    """Least-squares fit of a rational function to ``reference`` on a grid.

    Adam on the mean squared error, in float64, starting from the identity
    ``R(x) = x`` with a tiny random perturbation of the denominator so the
    ``|.|`` kink does not pin b at zero.  The input is rescaled to [-1, 1]
    during the fit and the coefficients mapped back afterwards.
    """
    lo, hi, points = grid
    points = int(points)
    if points < 10 * (m + n):
        raise ValueError(f"need at least {10 * (m + n)} grid points, got {points}")
    x = np.linspace(lo, hi, points)
    y = np.asarray(reference(x), dtype=np.float64)
    if y.shape != x.shape or not np.all(np.isfinite(y)):
        raise ValueError("reference must return finite values on the grid")

    scale = max(abs(lo), abs(hi))
    u = x / scale
    rng = np.random.default_rng(seed)
    with T.precision(64):
        a0 = np.zeros(m + 1)
        a0[1] = scale  # R(x) = x in the scaled variable
        ut = T.tensor(u)
        yt = T.tensor(y)
        exact = T.rational(ut, T.tensor(a0), T.tensor(np.zeros(n)), abs_of_sum) - yt
        if float((exact * exact).mean().data) < tol:
            steps = 0  # the identity start already fits
        a = T.tensor(a0, requires_grad=True)
        b = T.tensor(np.zeros(n) if steps == 0 else rng.normal(0.0, 1e-3, size=n), requires_grad=True)
        opt = AdamW([a, b], lr=lr)
        best = (np.inf, a.data.copy(), b.data.copy())
        done = 0
        for step in range(steps):
            opt.lr = lr * (1.0 - step / steps) + 1e-5
            err = T.rational(ut, a, b, abs_of_sum) - yt
            loss = (err * err).mean()
            val = float(loss.data)
            if val < best[0]:
                best = (val, a.data.copy(), b.data.copy())
            done = step + 1
            if val < tol:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()

    _, a_s, b_s = best
    # undo x -> x / scale: coefficient k picks up scale^-k
    with T.precision(64):
        act = RationalActivation(a_s / scale ** np.arange(m + 1), b_s / scale ** np.arange(1, n + 1), abs_of_sum)
        fitted = act.numpy_eval(x)
    mse = float(np.mean((fitted - y) ** 2))
    max_err = float(np.max(np.abs(fitted - y)))
    log.info("rational fit: mse=%.3e max_abs=%.3e steps=%d", mse, max_err, done)
    return FitResult(act, mse, max_err, done)


def gelu_reference(x):
    with T.precision(64):
        return T.gelu(T.tensor(np.asarray(x, dtype=np.float64))).data


@functools.lru_cache(maxsize=4)
def _gelu_fit(m: int, n: int, abs_of_sum: bool):
    res = fit_to_reference(gelu_reference, (-3.0, 3.0, 601), m=m, n=n, abs_of_sum=abs_of_sum)
    return res.activation.a.data.copy(), res.activation.b.data.copy(), res.max_abs_error


def gelu_rational(m: int = 6, n: int = 5, abs_of_sum: bool = True) -> RationalActivation:
    """A fresh rational activation initialised to approximate GELU (fit cached per process)."""
    a, b, _ = _gelu_fit(m, n, abs_of_sum)
    dt = T.default_dtype()
    return RationalActivation(a.astype(dt), b.astype(dt), abs_of_sum)


def make_activation(kind: str, m: int = 6, n: int = 5, abs_of_sum: bool = True):
    if kind == "rational":
        return gelu_rational(m, n, abs_of_sum)
    return fixed_activation(kind)
