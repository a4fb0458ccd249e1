"""Synthetic desk-scale tasks and a character tokenizer.

Every example is a (prompt, target) pair of strings.  Prompts start with
the BOS character and end with the separator; targets are what the model
should emit after the separator.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, SEP = "_", "^", "="
MODE_COPY, MODE_REVERSE, MODE_SHIFT = ">", "<", "+"
RESERVED = (PAD, BOS, SEP)
MODES = (MODE_COPY, MODE_REVERSE, MODE_SHIFT)
SYMBOLS = string.ascii_lowercase + string.digits
PAYLOAD_ALPHABET = SYMBOLS[:16]


class Tokenizer:
    """Character-level tokenizer; ids 0..2 are pad, bos and sep."""

    def __init__(self, alphabet: str = "".join(MODES) + SYMBOLS):
        chars = list(RESERVED) + [c for c in alphabet if c not in RESERVED]
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in alphabet")
        self.chars = chars
        self.index = {c: i for i, c in enumerate(chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in tokenizer alphabet") from None

    encode = tokenize

    def detokenize(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)

    decode = detokenize


def tokenize(text: str, tok: Tokenizer | None = None) -> list[int]:
    return (tok or Tokenizer()).tokenize(text)


def detokenize(ids, tok: Tokenizer | None = None) -> str:
    return (tok or Tokenizer()).detokenize(ids)


@dataclass
class TaskSpec:
    name: str
    seed: int
    sizes: tuple[int, int, int]
    splits: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    n_classes: int | None = None

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]


def _unique_payloads(rng: np.random.Generator, n: int, length: int, alphabet: str, key=None) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    cap = len(alphabet) ** length
    if n > cap:
        raise ValueError(f"cannot draw {n} distinct strings of length {length} over {len(alphabet)} symbols")
    while len(out) < n:
        ids = rng.integers(0, len(alphabet), size=length)
        s = "".join(alphabet[i] for i in ids)
        k = s if key is None else key(s)
        if k in seen:
            continue
        seen.add(k)
        out.append(s)
    return out


def _split(items: list, sizes) -> dict[str, list]:
    n_tr, n_va, n_te = sizes
    return {"train": items[:n_tr], "val": items[n_tr:n_tr + n_va], "test": items[n_tr + n_va:n_tr + n_va + n_te]}


def gen_copy_task(seed: int = 0, sizes=(2000, 200, 200), seq_len: int = 12,
                  alphabet: str = PAYLOAD_ALPHABET) -> TaskSpec:
    """Prompt ``^<payload>=``, target ``<payload>``; payloads unique across splits."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    rng = np.random.default_rng(seed)
    payloads = _unique_payloads(rng, sum(sizes), seq_len, alphabet)
    examples = [(BOS + p + SEP, p) for p in payloads]
    return TaskSpec("copy", seed, tuple(sizes), _split(examples, sizes))


def _majority_capacity(seq_len: int, n_classes: int) -> int:
    """Number of strings whose most frequent symbol is one fixed class, strictly."""

    def at_most(n: int, m: int, cap: int) -> int:
        # strings of length n over m symbols with every count <= cap
        ways = [1] + [0] * n
        for _ in range(m):
            ways = [sum(math.comb(j, c) * ways[j - c] for c in range(min(cap, j) + 1)) for j in range(n + 1)]
        return ways[n]

    return sum(math.comb(seq_len, c) * at_most(seq_len - c, n_classes - 1, c - 1) for c in range(1, seq_len + 1))


def gen_classification_task(seed: int = 0, sizes=(2000, 200, 200), n_classes: int = 2,
                            seq_len: int = 15) -> TaskSpec:
    """Majority-symbol classification: the label token is the most frequent symbol.

    Labels cycle through the classes so the corpus is balanced; sequences
    with a tied majority are redrawn.
    """
    if not 2 <= n_classes <= 16:
        raise ValueError("n_classes must be in [2, 16]")
    alphabet = PAYLOAD_ALPHABET[:n_classes]
    rng = np.random.default_rng(seed)
    total = sum(sizes)
    if -(-total // n_classes) > _majority_capacity(seq_len, n_classes):
        raise ValueError(f"cannot draw {total} distinct {n_classes}-class examples of length {seq_len}")
    seen: set[str] = set()
    examples = []
    while len(examples) < total:
        label = len(examples) % n_classes
        ids = rng.integers(0, n_classes, size=seq_len)
        counts = np.bincount(ids, minlength=n_classes)
        top = counts.max()
        if (counts == top).sum() > 1 or counts[label] != top:
            continue
        s = "".join(alphabet[i] for i in ids)
        if s in seen:
            continue
        seen.add(s)
        examples.append((BOS + s + SEP, alphabet[label]))
    # interleave classes deterministically before splitting
    order = rng.permutation(total)
    examples = [examples[i] for i in order]
    return TaskSpec("classify", seed, tuple(sizes), _split(examples, sizes), n_classes=n_classes)


def _transform(mode: str, s: str, alphabet: str) -> str:
    if mode == MODE_COPY:
        return s
    if mode == MODE_REVERSE:
        return s[::-1]
    k = len(alphabet)
    return "".join(alphabet[(alphabet.index(c) + 1) % k] for c in s)


def gen_pretrain_corpus(seed: int = 0, n: int = 6000, min_len: int = 4, max_len: int = 14,
                        alphabet: str = PAYLOAD_ALPHABET) -> list[tuple[str, str]]:
    """Generic string-transformation sequences for the backbone pretrain pass.

    Each sequence names its transformation (copy, reverse or shift-by-one)
    with a mode character in the first position: ``<mode><payload>=<out>``.
    Downstream tasks start with BOS instead, so the frozen backbone has the
    skills but must be steered to pick the right one.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mode = MODES[i % len(MODES)]
        length = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(0, len(alphabet), size=length)
        s = "".join(alphabet[j] for j in ids)
        out.append((mode + s + SEP, _transform(mode, s, alphabet)))
    return out


TASKS = {"copy": gen_copy_task, "classify": gen_classification_task}


def make_task(name: str, seed: int = 0, **kwargs) -> TaskSpec:
    try:
        gen = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None
    return gen(seed=seed, **kwargs)


def save_corpus(examples, path) -> None:
    """Write ``prompt<TAB>target`` lines, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for prompt, target in examples:
            if "\t" in prompt or "\t" in target or "\n" in prompt or "\n" in target:
                raise ValueError("prompt/target may not contain tabs or newlines")
            fh.write(f"{prompt}\t{target}\n")


def load_corpus(path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'prompt<TAB>target'")
        out.append((parts[0], parts[1]))
    return out


@dataclass
class Batch:
    """Teacher-forced batch: inputs/targets are shifted by one; ``mask`` marks target positions."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    prompt_lens: np.ndarray
    split: str = "train"

    def __len__(self):
        return self.inputs.shape[0]


def make_batch(examples, tok: Tokenizer, split: str = "train") -> Batch:
    if not examples:
        raise ValueError("empty batch")
    seqs, plens = [], []
    for prompt, target in examples:
        p, t = tok.tokenize(prompt), tok.tokenize(target)
        if not t:
            raise ValueError("empty target")
        seqs.append(p + t)
        plens.append(len(p))
    L = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inputs = np.full((B, L), tok.pad_id, dtype=np.int64)
    targets = np.full((B, L), tok.pad_id, dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.float32)
    for b, (s, p) in enumerate(zip(seqs, plens)):
        n = len(s) - 1
        inputs[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        mask[b, p - 1:n] = 1.0
    return Batch(inputs, targets, mask, np.asarray(plens, dtype=np.int64), split)


def iterate_batches(examples, batch_size: int, tok: Tokenizer, rng: np.random.Generator | None = None,
                    split: str = "train"):
    idx = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for s in range(0, len(idx), batch_size):
        yield make_batch([examples[i] for i in idx[s:s + batch_size]], tok, split)
