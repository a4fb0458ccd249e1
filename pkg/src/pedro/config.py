"""Run configuration: a flat JSON object with a fixed set of keys.

Unknown keys are rejected rather than ignored.  ``preset`` selects one of
the PEDRO ablation variants and is applied before the explicit keys.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .baselines import (BitfitAdapter, Ia3Adapter, LoraAdapter, count_bitfit_params, count_ia3_params,
                        count_lora_params)
from .model import Adapter, ModelConfig
from .pedro import DEFAULT_TARGETS, PedroAdapter, count_trainable_params
from .trainer import TrainConfig

ADAPTER_KINDS = ("pedro", "lora", "ia3", "bitfit", "none")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    # backbone
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 172
    n_layers: int = 4
    max_seq_len: int = 320
    vocab_size: int = 42
    ffn_act: str = "gelu"
    backbone_seed: int = 0
    # backbone pretrain pass
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 32
    pretrain_corpus_size: int = 6000
    # pedro
    preset: str = "pedro"
    r: int = 12
    targets: tuple = DEFAULT_TARGETS
    pooler: str = "last_token"
    activations: object = "rational"
    rational_m: int = 6
    rational_n: int = 5
    abs_of_sum: bool = True
    # baselines
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_targets: tuple = ("q", "v")
    bitfit_targets: tuple = ("q", "v", "u")
    # task
    task_seed: int = 0
    task_seq_len: int = 12
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 200
    n_classes: int = 2
    # training
    lr: float = 1e-3
    theta_lr: float | None = None
    batch_size: int = 16
    max_epochs: int = 10
    max_steps: int | None = None
    warmup_fraction: float = 0.06
    eval_interval: int = 200
    patience: int = 10
    bilevel: bool = False
    weight_decay: float = 0.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                           d_ffn=self.d_ffn, n_layers=self.n_layers, max_seq_len=self.max_seq_len,
                           ffn_act=self.ffn_act)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(lr=self.lr, theta_lr=self.theta_lr, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, max_steps=self.max_steps,
                           warmup_fraction=self.warmup_fraction, eval_interval=self.eval_interval,
                           patience=self.patience, seed=seed, bilevel=self.bilevel,
                           weight_decay=self.weight_decay)

    def activation_list(self) -> list[str]:
        acts = self.activations
        if isinstance(acts, str):
            if acts == "relu-then-gelu":
                half = self.n_layers // 2
                return ["relu"] * half + ["gelu"] * (self.n_layers - half)
            return [acts] * self.n_layers
        return list(acts)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("targets", "lora_targets", "bitfit_targets"):
            d[k] = list(d[k])
        if not isinstance(d["activations"], str):
            d["activations"] = list(d["activations"])
        return d


# Ablation variants; r values follow the budget-matching used for the
# larger target sets.
PRESETS: dict[str, dict] = {
    "pedro": {},
    "pedro-1": {"pooler": "mean"},
    "pedro-2": {"pooler": "max"},
    "pedro-3": {"targets": ("q", "k", "v", "g", "u"), "r": 8},
    "pedro-4": {"targets": ("q", "v"), "r": 24},
    "pedro-5": {"activations": "relu"},
    "pedro-6": {"activations": "gelu"},
    "pedro-7": {"activations": "relu-then-gelu"},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_KEYS = {"targets", "lora_targets", "bitfit_targets"}
_OPTIONAL = {"lora_alpha", "theta_lr", "max_steps"}


def _coerce(key: str, value):
    default = _FIELDS[key].default
    if value is None:
        if key in _OPTIONAL:
            return None
        raise ConfigError(f"config key {key!r} may not be null", key)
    if key in _TUPLE_KEYS:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"config key {key!r} must be a list of strings", key)
        return tuple(value)
    if key == "activations":
        if isinstance(value, str) or (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            return value
        raise ConfigError("config key 'activations' must be a string or list of strings", key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean", key)
        return value
    if isinstance(default, int) and key not in _OPTIONAL:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer", key)
        return value
    if isinstance(default, float) or key in ("lora_alpha", "theta_lr"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number", key)
        return float(value)
    if key == "max_steps":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("config key 'max_steps' must be an integer", key)
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(f"config key {key!r} must be of type {type(default).__name__}", key)
    return value


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key)
    preset = raw.get("preset", "pedro")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}", "preset")
    values = {k: _coerce(k, v) for k, v in PRESETS[preset].items()}
    values.update({k: _coerce(k, v) for k, v in raw.items()})
    cfg = RunConfig(**values)
    try:
        cfg.model_config()
        cfg.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return from_dict(raw)


def make_adapter(kind: str, cfg: RunConfig, seed: int = 0) -> Adapter | None:
    mc = cfg.model_config()
    if kind == "pedro":
        return PedroAdapter(mc, r=cfg.r, targets=cfg.targets, pooler=cfg.pooler,
                            activations=cfg.activation_list(), rational_order=(cfg.rational_m, cfg.rational_n),
                            abs_of_sum=cfg.abs_of_sum, seed=seed)
    if kind == "lora":
        return LoraAdapter(mc, rank=cfg.lora_rank, alpha=cfg.lora_alpha, targets=cfg.lora_targets, seed=seed)
    if kind == "ia3":
        return Ia3Adapter(mc, seed=seed)
    if kind == "bitfit":
        return BitfitAdapter(mc, targets=cfg.bitfit_targets, seed=seed)
    if kind == "none":
        return None
    raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}", "adapter")


def count_params(kind: str, cfg: RunConfig, include_bias: bool = False) -> int:
    """Tunable parameter count from shapes alone (no weights are allocated)."""
    mc = cfg.model_config()
    if kind == "pedro":
        return count_trainable_params(mc, cfg.r, cfg.targets, include_bias=include_bias)
    if kind == "lora":
        return count_lora_params(mc, cfg.lora_rank, cfg.lora_targets)
    if kind == "ia3":
        return count_ia3_params(mc)
    if kind == "bitfit":
        return count_bitfit_params(mc, cfg.bitfit_targets)
    if kind == "none":
        return 0
    raise ConfigError(f"unknown adapter kind {kind!r}", "adapter")
