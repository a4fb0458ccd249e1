"""LoRA, (IA)^3 and BitFit attached through the same backbone hooks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Adapter, ModelConfig
from .tensor import TensorNode

LORA_TARGETS = ("q", "v")
IA3_TARGETS = {"k": "k", "v": "v", "ffn_inner": "ff"}
BITFIT_TARGETS = ("q", "v", "u")


class LoraModule:
    def __init__(self, d_in: int, d_out: int, rank: int = 4, alpha: float | None = None, rng=None, name: str = ""):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.rank = rank
        self.alpha = 2.0 * rank if alpha is None else float(alpha)
        self.scaling = self.alpha / rank
        self.a = T.tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)), requires_grad=True)
        self.b = T.tensor(np.zeros((rank, d_out)), requires_grad=True)
        self.name = name

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    def macs_per_token(self) -> int:
        return self.rank * (self.d_in + self.d_out)


def lora_forward(x, base_weight, lora: LoraModule) -> TensorNode:
    """x W + (x A) B * (alpha / rank), never merged into W."""
    if x.shape[-1] != base_weight.shape[0] or base_weight.shape[0] != lora.d_in or base_weight.shape[1] != lora.d_out:
        raise ValueError(
            f"shape mismatch: x {x.shape}, W {base_weight.shape}, A {lora.a.shape}, B {lora.b.shape}")
    return x @ base_weight + ((x @ lora.a) @ lora.b) * lora.scaling


class LoraAdapter(Adapter):
    kind = "lora"

    def __init__(self, config: ModelConfig, rank: int = 4, alpha: float | None = None,
                 targets=LORA_TARGETS, seed: int = 0):
        super().__init__()
        self.config = config
        self.rank = rank
        self.targets = tuple(t for t in ("q", "k", "v", "o") if t in set(targets))
        if not self.targets or set(targets) - set(self.targets):
            raise ValueError(f"LoRA targets must be a non-empty subset of q, k, v, o; got {targets}")
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.modules = [
            {t: LoraModule(d, d, rank, alpha, rng, name=f"lora.{i}.{t}") for t in self.targets}
            for i in range(config.n_layers)
        ]
        self.counters.update(extra_macs_decode=0)
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self):
        out = []
        for i, mods in enumerate(self.modules):
            for t in self.targets:
                out += [(f"lora.{i}.{t}.a", mods[t].a), (f"lora.{i}.{t}.b", mods[t].b)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def project(self, layer, name, x, w, decoding):
        mod = self.modules[layer].get(name)
        if mod is None:
            return x @ w
        if decoding:
            self.counters["decode"] += 1
            self.counters["extra_macs_decode"] += mod.macs_per_token() * x.shape[0] * x.shape[1]
        else:
            self.counters["prefill"] += 1
        return lora_forward(x, w, mod)

    def hooked_modules(self) -> int:
        return self.config.n_layers * len(self.targets)

    def extra_mac_per_decode_step(self) -> int:
        return sum(m.macs_per_token() for mods in self.modules for m in mods.values())

    def config_dict(self) -> dict:
        m = self.modules[0][self.targets[0]]
        return {"rank": self.rank, "alpha": m.alpha, "targets": list(self.targets)}


def ia3_apply(k, v, ffn_inner, vectors: dict):
    """Scale K, V and the FFN inner activation by fixed learned vectors."""
    return k * vectors["k"], v * vectors["v"], ffn_inner * vectors["ff"]


class Ia3Adapter(Adapter):
    kind = "ia3"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d, f = config.d_model, config.d_ffn
        self.vectors = [
            {"k": T.tensor(np.ones(d), requires_grad=True),
             "v": T.tensor(np.ones(d), requires_grad=True),
             "ff": T.tensor(np.ones(f), requires_grad=True)}
            for _ in range(config.n_layers)
        ]
        self.counters.update(extra_macs_decode=0)
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self):
        return [(f"ia3.{i}.{k}", vec[k]) for i, vec in enumerate(self.vectors) for k in ("k", "v", "ff")]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modify(self, layer, name, t, state, decoding=False):
        key = IA3_TARGETS.get(name)
        if key is None:
            return t
        if decoding:
            self.counters["extra_macs_decode"] += t.data.size
        return t * self.vectors[layer][key]

    def extra_mac_per_decode_step(self) -> int:
        return self.config.n_layers * (2 * self.config.d_model + self.config.d_ffn)

    def config_dict(self) -> dict:
        return {}


def bitfit_apply(h, bias):
    return h + bias


class BitfitAdapter(Adapter):
    kind = "bitfit"

    def __init__(self, config: ModelConfig, targets=BITFIT_TARGETS, seed: int = 0):
        super().__init__()
        self.config = config
        self.targets = tuple(targets)
        dims = {"q": config.d_model, "k": config.d_model, "v": config.d_model,
                "g": config.d_ffn, "u": config.d_ffn}
        bad = set(self.targets) - set(dims)
        if bad or not self.targets:
            raise ValueError(f"bad BitFit targets {targets}")
        self.biases = [{t: T.tensor(np.zeros(dims[t]), requires_grad=True) for t in self.targets}
                       for _ in range(config.n_layers)]
        self.counters.update(extra_macs_decode=0)
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self):
        return [(f"bitfit.{i}.{t}", b[t]) for i, b in enumerate(self.biases) for t in self.targets]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modify(self, layer, name, t, state, decoding=False):
        bias = self.biases[layer].get(name)
        if bias is None:
            return t
        if decoding:
            self.counters["extra_macs_decode"] += t.data.size
        return bitfit_apply(t, bias)

    def config_dict(self) -> dict:
        return {"targets": list(self.targets)}


def count_lora_params(config: ModelConfig, rank: int = 4, targets=LORA_TARGETS) -> int:
    return config.n_layers * len(tuple(targets)) * rank * (config.d_model + config.d_model)


def count_ia3_params(config: ModelConfig) -> int:
    return config.n_layers * (2 * config.d_model + config.d_ffn)


def count_bitfit_params(config: ModelConfig, targets=BITFIT_TARGETS) -> int:
    dims = {"q": config.d_model, "k": config.d_model, "v": config.d_model, "g": config.d_ffn, "u": config.d_ffn}
    return config.n_layers * sum(dims[t] for t in targets)
