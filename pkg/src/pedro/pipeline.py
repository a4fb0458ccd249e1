"""Glue between configs, backbones, adapters and checkpoints."""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, from_dict, make_adapter
from .model import Adapter, Transformer
from .tasks import Tokenizer, gen_pretrain_corpus, make_task
from .trainer import pretrain_backbone

log = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."


def backbone_tensors(model: Transformer) -> dict[str, np.ndarray]:
    return {BACKBONE_PREFIX + n: p.data for n, p in model.named_parameters()}


def backbone_hash(model: Transformer) -> str:
    return hashlib.sha256(checkpoint.dumps(backbone_tensors(model))).hexdigest()


def build_backbone(cfg: RunConfig, tok: Tokenizer | None = None) -> Transformer:
    """Seeded random init followed by the brief pretrain pass; returned frozen."""
    tok = tok or Tokenizer()
    mc = cfg.model_config()
    if mc.vocab_size < tok.vocab_size:
        raise ConfigError(f"vocab_size {mc.vocab_size} smaller than tokenizer vocabulary {tok.vocab_size}",
                          "vocab_size")
    model = Transformer(mc, seed=cfg.backbone_seed)
    if cfg.pretrain_steps > 0:
        corpus = gen_pretrain_corpus(cfg.backbone_seed, n=cfg.pretrain_corpus_size)
        losses = pretrain_backbone(model, corpus, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr,
                                   batch_size=cfg.pretrain_batch_size, seed=cfg.backbone_seed, tok=tok)
        log.info("backbone pretrain: %d steps, final loss %.4f", len(losses), np.mean(losses[-50:]))
    return model.freeze()


def load_backbone_into(model: Transformer, tensors: dict[str, np.ndarray]):
    for n, p in model.named_parameters():
        key = BACKBONE_PREFIX + n
        if key not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint lacks backbone tensor {key!r}", key)
        if tensors[key].shape != p.shape:
            raise checkpoint.CheckpointError(f"shape mismatch for {key!r}", key)
        p.data = tensors[key].astype(p.data.dtype)
    model.freeze()


def load_adapter_into(adapter: Adapter | None, tensors: dict[str, np.ndarray]):
    if adapter is None:
        return
    for n, p in adapter.named_parameters():
        if n not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint lacks adapter tensor {n!r}", n)
        if tensors[n].shape != p.shape:
            raise checkpoint.CheckpointError(f"shape mismatch for {n!r}", n)
        p.data = tensors[n].astype(p.data.dtype)


def save_run(path, model: Transformer, adapter: Adapter | None, kind: str, cfg: RunConfig, **meta):
    tensors = backbone_tensors(model)
    if adapter is not None:
        tensors.update({n: p.data for n, p in adapter.named_parameters()})
    echo = {"adapter": kind, "run": cfg.to_dict(), **meta}
    checkpoint.save(path, tensors, echo)


def load_run(path):
    """Rebuild (model, adapter, run config, meta) from a run checkpoint."""
    tensors, echo = checkpoint.load(path)
    try:
        kind = echo["adapter"]
        cfg = from_dict(echo["run"])
    except (KeyError, TypeError) as e:
        raise checkpoint.CheckpointError(f"checkpoint config echo is incomplete: {e}") from None
    model = Transformer(cfg.model_config(), seed=cfg.backbone_seed)
    load_backbone_into(model, tensors)
    adapter = make_adapter(kind, cfg)
    load_adapter_into(adapter, tensors)
    meta = {k: v for k, v in echo.items() if k not in ("adapter", "run")}
    return model, adapter, cfg, meta


def task_for(cfg: RunConfig, name: str):
    seed = cfg.task_seed
    sizes = (cfg.train_size, cfg.val_size, cfg.test_size)
    if name == "copy":
        return make_task("copy", seed=seed, sizes=sizes, seq_len=cfg.task_seq_len)
    if name == "classify":
        return make_task("classify", seed=seed, sizes=sizes, n_classes=cfg.n_classes)
    return make_task(name, seed=seed)
