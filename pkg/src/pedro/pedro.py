"""Prompt-dependent representation modification.

Each layer owns a small vector generator: pool the layer's (normed) input
over the prompt tokens, down-project to ``r`` dims, apply an activation,
up-project and add a bias.  The output is split into per-channel scaling
vectors for the targeted representations (Q, V and U by default).  The
vectors are produced once at prefill and reused for every decode step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Adapter, ModelConfig
from .rational import FixedActivation, RationalActivation, make_activation
from .tensor import TensorNode

TARGET_ORDER = ("q", "k", "v", "g", "u")
POOLERS = ("last_token", "mean", "max")
DEFAULT_TARGETS = ("q", "v", "u")


def target_dims(config: ModelConfig, targets) -> list[tuple[str, int]]:
    targets = normalize_targets(targets)
    return [(t, config.d_model if t in ("q", "k", "v") else config.d_ffn) for t in targets]


def normalize_targets(targets) -> tuple[str, ...]:
    targets = set(targets)
    if not targets:
        raise ValueError("target set must be non-empty")
    bad = targets - set(TARGET_ORDER)
    if bad:
        raise ValueError(f"unknown targets {sorted(bad)}; expected a subset of {TARGET_ORDER}")
    return tuple(t for t in TARGET_ORDER if t in targets)


def pool(h, mode: str = "last_token", prompt_lens=None) -> TensorNode:
    """Reduce prompt hidden states (T, d) or (B, T, d) to (d,) or (B, d).

    Only positions ``< prompt_lens[b]`` take part.
    """
    h = h if isinstance(h, TensorNode) else T.tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    B, L, _ = h.shape
    if L < 1:
        raise ValueError("cannot pool an empty prompt")
    lens = np.full(B, L, dtype=np.int64) if prompt_lens is None else np.asarray(prompt_lens, dtype=np.int64).reshape(B)
    if np.any(lens < 1) or np.any(lens > L):
        raise ValueError(f"prompt lengths must lie in [1, {L}]")
    if mode == "last_token":
        out = h[np.arange(B), lens - 1]
    elif mode in ("mean", "max"):
        if np.all(lens == L):
            out = h.mean(axis=1) if mode == "mean" else T.tmax(h, axis=1)
        else:
            mask = (np.arange(L)[None, :] < lens[:, None]).astype(h.dtype)[:, :, None]
            if mode == "mean":
                out = (h * mask).sum(axis=1) * (1.0 / lens.astype(h.dtype))[:, None]
            else:
                out = T.tmax(h + (mask - 1.0) * 1e9, axis=1)
    else:
        raise ValueError(f"unknown pooler {mode!r}; expected one of {POOLERS}")
    return out[0] if squeeze else out


@dataclass
class VectorGenerator:
    w_down: TensorNode
    w_up: TensorNode
    b_up: TensorNode
    activation: RationalActivation | FixedActivation
    pooler: str = "last_token"
    splits: list[tuple[str, int]] = field(default_factory=list)

    @classmethod
    def init(cls, d_model: int, r: int, splits, activation, pooler="last_token", rng=None):
        if r < 1:
            raise ValueError("bottleneck dimension r must be >= 1")
        if pooler not in POOLERS:
            raise ValueError(f"unknown pooler {pooler!r}")
        rng = rng or np.random.default_rng(0)
        out = sum(n for _, n in splits)
        return cls(
            w_down=T.tensor(rng.normal(0.0, 0.02, size=(d_model, r)), requires_grad=True),
            w_up=T.tensor(np.zeros((r, out)), requires_grad=True),
            b_up=T.tensor(np.ones(out), requires_grad=True),
            activation=activation,
            pooler=pooler,
            splits=list(splits),
        )

    @property
    def out_dim(self) -> int:
        return self.w_up.shape[1]

    def omega(self) -> list[TensorNode]:
        return [self.w_down, self.w_up, self.b_up]

    def theta(self) -> list[TensorNode]:
        return self.activation.parameters()


def generate_vectors(vg: VectorGenerator, h, prompt_lens=None) -> dict[str, TensorNode]:
    """Map prompt hidden states to the named adjustment vectors.

    Returns a dict of (d,) vectors for 2-D ``h`` and (B, d) for batched ``h``.
    """
    h = h if isinstance(h, TensorNode) else T.tensor(h)
    if h.shape[-1] != vg.w_down.shape[0]:
        raise ValueError(f"hidden size {h.shape[-1]} does not match W_down rows {vg.w_down.shape[0]}")
    if sum(n for _, n in vg.splits) != vg.out_dim:
        raise ValueError("split sizes do not add up to the generator output")
    pooled = pool(h, vg.pooler, prompt_lens)
    flat = vg.activation(pooled @ vg.w_down) @ vg.w_up + vg.b_up
    parts = T.split(flat, [n for _, n in vg.splits], axis=-1)
    return {name: p for (name, _), p in zip(vg.splits, parts)}


def apply_attention_mod(q, v, state: dict | None):
    """Q' = l_q * Q and V' = l_v * V, broadcasting over positions."""
    if state is None:
        raise ValueError("adapter state missing")
    return _scale(q, state.get("q")), _scale(v, state.get("v"))


def apply_ffn_mod(u, state: dict | None):
    if state is None:
        raise ValueError("adapter state missing")
    return _scale(u, state.get("u"))


def _scale(t, vec):
    if vec is None:
        return t
    if vec.ndim == 1:
        return t * vec
    # (B, d) against (B, L, d)
    return t * vec.reshape(vec.shape[0], 1, vec.shape[1])


class PedroAdapter(Adapter):
    """Per-layer vector generators attached through the backbone hooks.

    ``activations`` may be a single kind ("rational", "relu", "gelu") or a
    per-layer list of kinds.
    """

    kind = "pedro"
    needs_state = True

    def __init__(self, config: ModelConfig, r: int = 12, targets=DEFAULT_TARGETS, pooler: str = "last_token",
                 activations="rational", rational_order=(6, 5), abs_of_sum: bool = True, seed: int = 0):
        super().__init__()
        self.config = config
        self.r = r
        self.targets = normalize_targets(targets)
        self.pooler = pooler
        if isinstance(activations, str):
            activations = [activations] * config.n_layers
        activations = list(activations)
        if len(activations) != config.n_layers:
            raise ValueError(f"need {config.n_layers} activation kinds, got {len(activations)}")
        self.activation_kinds = activations
        self.rational_order = tuple(rational_order)
        self.abs_of_sum = abs_of_sum
        rng = np.random.default_rng(seed)
        splits = target_dims(config, self.targets)
        m, n = self.rational_order
        self.vgs = [
            VectorGenerator.init(config.d_model, r, splits, make_activation(kind, m, n, abs_of_sum), pooler, rng)
            for kind in activations
        ]
        self._mac_per_token = sum(n for _, n in splits)
        self.counters.update(extra_macs_decode=0)
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self):
        out = []
        for i, vg in enumerate(self.vgs):
            out += [(f"vg.{i}.w_down", vg.w_down), (f"vg.{i}.w_up", vg.w_up), (f"vg.{i}.b_up", vg.b_up)]
            if isinstance(vg.activation, RationalActivation):
                out += [(f"vg.{i}.act.a", vg.activation.a), (f"vg.{i}.act.b", vg.activation.b)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def theta(self) -> list[TensorNode]:
        return [p for vg in self.vgs for p in vg.theta()]

    def omega(self) -> list[TensorNode]:
        return [p for vg in self.vgs for p in vg.omega()]

    def prefill(self, layer, h, prompt_lens):
        self.counters["prefill"] += 1
        vecs = generate_vectors(self.vgs[layer], h, prompt_lens)
        return {k: v.reshape(v.shape[0], 1, v.shape[1]) for k, v in vecs.items()}

    def modify(self, layer, name, t, state, decoding=False):
        if name not in self.targets:
            return t
        if state is None:
            raise ValueError("PEDRO adapter used without prefill state")
        if decoding:
            self.counters["extra_macs_decode"] += t.data.size
        return t * state[name]

    def extra_mac_per_decode_step(self) -> int:
        return self._mac_per_token * self.config.n_layers

    def config_dict(self) -> dict:
        return {
            "r": self.r, "targets": list(self.targets), "pooler": self.pooler,
            "activations": list(self.activation_kinds), "rational_order": list(self.rational_order),
            "abs_of_sum": self.abs_of_sum,
        }


def count_trainable_params(config: ModelConfig, r: int = 12, targets=DEFAULT_TARGETS,
                           include_bias: bool = False, include_activation: bool = False,
                           rational_order=(6, 5)) -> int:
    """Vector-generator parameter count from shapes alone.

    Defaults count W_down and W_up only; flags add b_up and the rational
    coefficients.
    """
    if r < 1:
        raise ValueError("bottleneck dimension r must be >= 1")
    out = sum(n for _, n in target_dims(config, targets))
    per_layer = config.d_model * r + r * out
    if include_bias:
        per_layer += out
    if include_activation:
        m, n = rational_order
        per_layer += (m + 1) + n
    return config.n_layers * per_layer
