"""Adapter fine-tuning over a frozen backbone, with optional bi-level updates.

Rational-activation coefficients (theta) and the rest of the adapter
parameters (omega) get separate AdamW instances.  In bi-level mode each
step updates omega on a training batch and then theta on a validation
batch (first-order alternation); otherwise theta stays fixed.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import Adapter, Transformer
from .optim import AdamW, LinearSchedule
from .tasks import Batch, TaskSpec, Tokenizer, iterate_batches

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "split", "loss", "accuracy", "lr", "theta_updates", "omega_updates")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    theta_lr: float | None = None
    batch_size: int = 16
    max_epochs: int = 10
    max_steps: int | None = None
    warmup_fraction: float = 0.06
    eval_interval: int = 200
    patience: int = 10
    seed: int = 0
    bilevel: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, max_epochs and eval_interval must be >= 1")


@dataclass
class ParamPartition:
    theta: list
    omega: list
    frozen: list

    @classmethod
    def from_model(cls, model: Transformer, adapter: Adapter | None) -> "ParamPartition":
        params = adapter.parameters() if adapter is not None else []
        theta = list(adapter.theta()) if hasattr(adapter, "theta") else []
        theta_ids = {id(p) for p in theta}
        omega = [p for p in params if id(p) not in theta_ids]
        part = cls(theta, omega, model.parameters())
        part.check()
        return part

    def check(self):
        t, o, f = ({id(p) for p in s} for s in (self.theta, self.omega, self.frozen))
        if t & o or (t | o) & f:
            raise ValueError("parameter partition overlaps")


def masked_accuracy(logits: np.ndarray, batch: Batch) -> tuple[int, int]:
    pred = logits.argmax(axis=-1)
    m = batch.mask > 0
    return int(((pred == batch.targets) & m).sum()), int(m.sum())


def batch_loss(model: Transformer, adapter: Adapter | None, batch: Batch):
    logits = model.forward(batch.inputs, adapter=adapter, prompt_lens=batch.prompt_lens)
    return T.cross_entropy(logits, batch.targets, batch.mask), logits


class Trainer:
    def __init__(self, model: Transformer, adapter: Adapter | None, config: TrainConfig, total_steps: int = 1000):
        self.model = model
        self.adapter = adapter
        self.config = config
        self.partition = ParamPartition.from_model(model, adapter)
        for p in self.partition.frozen:
            p.requires_grad = False
        for p in self.partition.theta:
            p.requires_grad = config.bilevel
        self.omega_opt = AdamW(self.partition.omega, lr=config.lr, weight_decay=config.weight_decay) \
            if self.partition.omega else None
        self.theta_opt = AdamW(self.partition.theta, lr=config.theta_lr or config.lr) \
            if self.partition.theta else None
        self.schedule = LinearSchedule(config.lr, total_steps, config.warmup_fraction)
        self.theta_schedule = LinearSchedule(config.theta_lr or config.lr, total_steps, config.warmup_fraction)
        self.step_count = 0
        # provenance: (partition, split) -> number of updates
        self.provenance: Counter = Counter()

    @property
    def theta_updates(self) -> int:
        return sum(v for (part, _), v in self.provenance.items() if part == "theta")

    @property
    def omega_updates(self) -> int:
        return sum(v for (part, _), v in self.provenance.items() if part == "omega")

    def _clear(self):
        for p in self.partition.theta + self.partition.omega:
            p.grad = None

    def train_step(self, batch: Batch) -> tuple[float, np.ndarray]:
        """One omega update from ``batch``; theta and the backbone are left alone."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        self._clear()
        loss, logits = batch_loss(self.model, self.adapter, batch)
        val = float(loss.data)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite training loss at step {self.step_count}")
        if self.omega_opt is not None:
            loss.backward()
            self.omega_opt.lr = self.schedule(self.step_count)
            self.omega_opt.step()
            self.provenance[("omega", batch.split)] += 1
        self._clear()
        self.step_count += 1
        return val, logits.data

    def theta_step(self, batch: Batch) -> float:
        if self.theta_opt is None:
            raise RuntimeError("adapter has no theta parameters")
        self._clear()
        loss, _ = batch_loss(self.model, self.adapter, batch)
        val = float(loss.data)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at step {self.step_count}")
        loss.backward()
        self.theta_opt.lr = self.theta_schedule(max(0, self.step_count - 1))
        self.theta_opt.step()
        self.provenance[("theta", batch.split)] += 1
        self._clear()
        return val

    def bilevel_step(self, train_batch: Batch, val_batch: Batch) -> tuple[float, float]:
        """Omega update on the train batch, then theta update on the val batch."""
        if train_batch.split == val_batch.split or train_batch is val_batch:
            raise ValueError(f"bilevel_step needs batches from distinct splits, got {train_batch.split!r} twice")
        if not self.config.bilevel:
            raise RuntimeError("bilevel_step called with bilevel disabled")
        tr, _ = self.train_step(train_batch)
        va = self.theta_step(val_batch)
        return tr, va


def evaluate(examples, model: Transformer, adapter: Adapter | None = None, tok: Tokenizer | None = None,
             batch_size: int = 64) -> dict:
    """Teacher-forced loss and token accuracy over the target positions."""
    tok = tok or Tokenizer()
    if not examples:
        raise ValueError("no examples to evaluate")
    total_nll = 0.0
    correct = count = 0
    with T.no_grad():
        for batch in iterate_batches(examples, batch_size, tok, split="eval"):
            loss, logits = batch_loss(model, adapter, batch)
            c, n = masked_accuracy(logits.data, batch)
            total_nll += float(loss.data) * n
            correct += c
            count += n
    return {"accuracy": correct / count, "loss": total_nll / count, "n_examples": len(examples)}


def generation_accuracy(examples, model: Transformer, adapter: Adapter | None = None,
                        tok: Tokenizer | None = None, beam: int = 1) -> float:
    """Position-wise token accuracy of free-running decoding."""
    tok = tok or Tokenizer()
    correct = total = 0
    for prompt, target in examples:
        want = tok.tokenize(target)
        got = model.generate(tok.tokenize(prompt), len(want), beam=beam, adapter=adapter)
        correct += int(np.sum(np.asarray(got) == np.asarray(want)))
        total += len(want)
    return correct / total


def snapshot(adapter: Adapter | None) -> dict[str, np.ndarray]:
    return {} if adapter is None else {n: p.data.copy() for n, p in adapter.named_parameters()}


def restore(adapter: Adapter | None, snap: dict[str, np.ndarray]):
    if adapter is None:
        return
    for n, p in adapter.named_parameters():
        p.data[...] = snap[n]


@dataclass
class FitResult:
    best_params: dict
    best_val_loss: float
    history: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    provenance: dict = field(default_factory=dict)

    def write_history(self, path):
        write_history(self.history, path)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(row.get(k, "")) for k in HISTORY_COLUMNS})


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else v


def fit(task: TaskSpec, model: Transformer, adapter: Adapter | None, config: TrainConfig,
        tok: Tokenizer | None = None, eval_fn=None) -> FitResult:
    """Train until epochs/steps run out or val loss stops improving.

    The adapter ends up holding the best-val parameters.
    """
    tok = tok or Tokenizer()
    train, val = task.train, task.val
    if not train or not val:
        raise ValueError("task needs non-empty train and val splits")
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = steps_per_epoch * config.max_epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    trainer = Trainer(model, adapter, config, total_steps=total)
    rng = np.random.default_rng(config.seed)
    val_rng = np.random.default_rng(config.seed + 1)
    history: list[dict] = []
    best_loss, best = math.inf, snapshot(adapter)
    bad = 0
    stopped = False
    run_loss = run_correct = run_count = run_n = 0

    def val_batches():
        while True:
            yield from iterate_batches(val, config.batch_size, tok, val_rng, split="val")

    vb = val_batches()
    for epoch in range(config.max_epochs):
        for batch in iterate_batches(train, config.batch_size, tok, rng, split="train"):
            lr = trainer.schedule(trainer.step_count)
            if config.bilevel and trainer.theta_opt is not None:
                loss, _ = trainer.bilevel_step(batch, next(vb))
                # train logits not kept in bilevel mode; accuracy tracked on eval only
                c = n = 0
            else:
                loss, logits = trainer.train_step(batch)
                c, n = masked_accuracy(logits, batch)
            run_loss += loss
            run_n += 1
            run_correct += c
            run_count += n
            step = trainer.step_count
            if step % config.eval_interval == 0 or step == total:
                history.append({
                    "step": step, "split": "train", "loss": run_loss / run_n,
                    "accuracy": run_correct / run_count if run_count else float("nan"), "lr": lr,
                    "theta_updates": trainer.theta_updates, "omega_updates": trainer.omega_updates,
                })
                run_loss = run_correct = run_count = run_n = 0
                metrics = (eval_fn or evaluate)(val, model, adapter, tok)
                if not math.isfinite(metrics["loss"]):
                    raise DivergenceError(f"non-finite validation loss at step {step}")
                history.append({
                    "step": step, "split": "val", "loss": metrics["loss"], "accuracy": metrics["accuracy"],
                    "lr": lr, "theta_updates": trainer.theta_updates, "omega_updates": trainer.omega_updates,
                })
                log.info("step %d train %.4f val %.4f acc %.4f", step, history[-2]["loss"],
                         metrics["loss"], metrics["accuracy"])
                if metrics["loss"] < best_loss:
                    best_loss, best, bad = metrics["loss"], snapshot(adapter), 0
                else:
                    bad += 1
                    if bad >= config.patience:
                        stopped = True
            if stopped or step >= total:
                break
        if stopped or trainer.step_count >= total:
            break
    restore(adapter, best)
    prov = {f"{part}:{split}": n for (part, split), n in sorted(trainer.provenance.items())}
    return FitResult(best, best_loss, history, trainer.step_count, stopped, prov)


def pretrain_backbone(model: Transformer, corpus, steps: int = 2000, lr: float = 3e-3, batch_size: int = 32,
                      seed: int = 0, tok: Tokenizer | None = None, weight_decay: float = 0.01) -> list[float]:
    """Brief full-parameter LM pass on generic sequences; returns the loss curve.

    The model is left frozen afterwards.
    """
    tok = tok or Tokenizer()
    model.unfreeze()
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = LinearSchedule(lr, steps, 0.06)
    rng = np.random.default_rng(seed)
    losses = []
    step = 0
    while step < steps:
        for batch in iterate_batches(corpus, batch_size, tok, rng):
            opt.zero_grad()
            loss, _ = batch_loss(model, None, batch)
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"pretraining diverged at step {step}")
            loss.backward()
            opt.lr = sched(step)
            opt.step()
            losses.append(float(loss.data))
            step += 1
            if step >= steps:
                break
    model.freeze()
    return losses


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
