"""Decoder-only transformer backbone with a LLaMA-style block.

Pre-norm (RMS) blocks, rotary position embeddings on Q and K, multi-head
causal self-attention and a gated FFN ``(act(x W_G) * (x W_U)) W_D``.
Adapters plug in through a small hook protocol (see :class:`Adapter`), so the
same forward serves the bare backbone, PEDRO and the baselines.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import TensorNode


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 48
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 172
    n_layers: int = 4
    max_seq_len: int = 320
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    ffn_act: str = "gelu"

    def __post_init__(self):
        for k in ("vocab_size", "d_model", "n_heads", "d_ffn", "n_layers", "max_seq_len"):
            v = getattr(self, k)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.ffn_act not in ("gelu", "silu", "relu"):
            raise ValueError(f"unknown ffn_act {self.ffn_act!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


_FFN_ACTS = {"gelu": T.gelu, "silu": T.silu, "relu": T.relu}


@dataclass
class TransformerLayer:
    w_q: TensorNode
    w_k: TensorNode
    w_v: TensorNode
    w_o: TensorNode
    w_g: TensorNode
    w_u: TensorNode
    w_d: TensorNode
    attn_norm: TensorNode
    ffn_norm: TensorNode

    def named_parameters(self, prefix: str):
        for k, v in self.__dict__.items():
            yield f"{prefix}.{k}", v


@dataclass
class KVCache:
    """Per-layer keys/values, shape (batch, heads, cached_len, d_head).

    Keys are stored after rotation so they never need re-rotating.
    """

    n_layers: int
    max_len: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.n_layers
            self.values = [None] * self.n_layers

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=2)
        return self.keys[layer], self.values[layer]

    def reorder(self, idx: np.ndarray):
        """Select batch rows (beam reordering)."""
        self.keys = [None if k is None else k[idx] for k in self.keys]
        self.values = [None if v is None else v[idx] for v in self.values]

    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values) if k is not None)


class Adapter:
    """Hook protocol.  The base class is the identity (bare backbone).

    ``project`` computes a linear projection of the layer input (LoRA adds
    its low-rank path here), ``modify`` rescales or shifts a named hidden
    representation (q, k, v, g, u or ffn_inner) and ``prefill`` lets an
    adapter build per-request state from prompt hidden states.
    """

    kind = "none"
    needs_state = False

    def __init__(self):
        self.counters = {"prefill": 0, "decode": 0}

    def reset_counters(self):
        for k in self.counters:
            self.counters[k] = 0

    def parameters(self) -> list[TensorNode]:
        return []

    def named_parameters(self):
        return []

    def prefill(self, layer: int, h: TensorNode, prompt_lens: np.ndarray):
        return None

    def project(self, layer: int, name: str, x: TensorNode, w: TensorNode, decoding: bool) -> TensorNode:
        return x @ w

    def modify(self, layer: int, name: str, t: TensorNode, state, decoding: bool = False) -> TensorNode:
        return t


class AdapterStateMissing(RuntimeError):
    pass


def _rope_tables(max_len: int, d_head: int, base: float):
    half = d_head // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(max_len, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1)
    # rotate_half(x) = x @ R with R = [[0, I], [-I, 0]]
    rot = np.zeros((d_head, d_head))
    rot[half:, :half] = -np.eye(half)
    rot[:half, half:] = np.eye(half)
    return cos, sin, rot


class Transformer:
    """Backbone weights plus forward/generation.

    Weights are plain :class:`TensorNode` leaves; ``freeze()`` clears their
    ``requires_grad`` so no backbone gradient is ever computed.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, init_std: float = 0.02):
        self.config = config
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ffn

        def w(*shape, std=init_std):
            return T.tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        self.embed = w(config.vocab_size, d)
        out_std = init_std / math.sqrt(2 * config.n_layers)
        self.layers = [
            TransformerLayer(
                w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d, std=out_std),
                w_g=w(d, f), w_u=w(d, f), w_d=w(f, d, std=out_std),
                attn_norm=T.tensor(np.ones(d), requires_grad=True),
                ffn_norm=T.tensor(np.ones(d), requires_grad=True),
            )
            for _ in range(config.n_layers)
        ]
        self.final_norm = T.tensor(np.ones(d), requires_grad=True)
        self.lm_head = w(d, config.vocab_size)
        self._build_tables()
        for name, p in self.named_parameters():
            p.name = name

    def _build_tables(self):
        cfg = self.config
        cos, sin, rot = _rope_tables(cfg.max_seq_len, cfg.d_head, cfg.rope_base)
        self._rope = {}
        for dt in (np.float32, np.float64):
            self._rope[np.dtype(dt)] = (cos.astype(dt), sin.astype(dt), rot.astype(dt))
        self._masks: dict = {}

    # -- parameters --------------------------------------------------------
    def named_parameters(self):
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}")
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def parameters(self) -> list[TensorNode]:
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # -- pieces ------------------------------------------------------------
    def _causal_mask(self, q_len: int, k_len: int, dtype):
        key = (q_len, k_len, np.dtype(dtype))
        m = self._masks.get(key)
        if m is None:
            offset = k_len - q_len
            allowed = np.arange(k_len)[None, :] <= (np.arange(q_len)[:, None] + offset)
            m = np.where(allowed, 0.0, -1e9).astype(dtype)
            self._masks[key] = m
        return m

    def _rotate(self, x: TensorNode, start: int) -> TensorNode:
        # x: (B, H, L, dh)
        cos, sin, rot = self._rope[x.dtype]
        L = x.shape[2]
        c, s = cos[start:start + L], sin[start:start + L]
        return x * c + (x @ rot) * s

    def _split_heads(self, t: TensorNode) -> TensorNode:
        B, L, _ = t.shape
        cfg = self.config
        return t.reshape(B, L, cfg.n_heads, cfg.d_head).transpose(0, 2, 1, 3)

    def attention_forward(self, x, i, cache=None, adapter=None, state=None, start=0, decoding=False):
        """Causal multi-head attention for layer ``i``; ``x`` is the normed input (B, L, d)."""
        layer = self.layers[i]
        ad = adapter or _IDENTITY
        B, L, d = x.shape
        q = ad.modify(i, "q", ad.project(i, "q", x, layer.w_q, decoding), state, decoding)
        k = ad.modify(i, "k", ad.project(i, "k", x, layer.w_k, decoding), state, decoding)
        v = ad.modify(i, "v", ad.project(i, "v", x, layer.w_v, decoding), state, decoding)
        q = self._rotate(self._split_heads(q), start)
        k = self._rotate(self._split_heads(k), start)
        v = self._split_heads(v)
        if cache is not None:
            if k.requires_grad or v.requires_grad:
                raise RuntimeError("KV cache is inference-only")
            kd, vd = cache.append(i, k.data, v.data)
            k, v = T.tensor(kd), T.tensor(vd)
        S = k.shape[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.config.d_head))
        scores = scores + self._causal_mask(L, S, scores.dtype)
        probs = T.softmax(scores, axis=-1)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return ad.project(i, "o", ctx, layer.w_o, decoding)

    def ffn_forward(self, x, i, adapter=None, state=None, decoding=False):
        layer = self.layers[i]
        ad = adapter or _IDENTITY
        g = ad.modify(i, "g", ad.project(i, "g", x, layer.w_g, decoding), state, decoding)
        u = ad.modify(i, "u", ad.project(i, "u", x, layer.w_u, decoding), state, decoding)
        inner = ad.modify(i, "ffn_inner", _FFN_ACTS[self.config.ffn_act](g) * u, state, decoding)
        return ad.project(i, "d", inner, layer.w_d, decoding)

    # -- full forward ------------------------------------------------------
    def forward(self, tokens, adapter: Adapter | None = None, cache: KVCache | None = None,
                state=None, prompt_lens=None, return_state: bool = False):
        """Logits (B, L, vocab) for token ids (L,) or (B, L).

        Without ``state`` this is a prefill: adapters that need per-request
        state build it from the prompt positions ``[0, prompt_lens)``
        (default: the whole input).  With ``cache`` the input is the new
        suffix only.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        B, L = tokens.shape
        cfg = self.config
        if L < 1:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        start = cache.length if cache is not None else 0
        if start + L > cfg.max_seq_len:
            raise SequenceOverflowError(f"sequence length {start + L} exceeds max_seq_len={cfg.max_seq_len}")

        decoding = start > 0
        building = adapter is not None and adapter.needs_state and state is None
        if adapter is not None and adapter.needs_state and decoding and state is None:
            raise AdapterStateMissing("decode step without adapter state from prefill")
        if building:
            if prompt_lens is None:
                prompt_lens = np.full(B, L, dtype=np.int64)
            prompt_lens = np.asarray(prompt_lens, dtype=np.int64)
            state = [None] * cfg.n_layers

        h = T.embedding(self.embed, tokens)
        for i, layer in enumerate(self.layers):
            x = T.rms_norm(h, layer.attn_norm, cfg.norm_eps)
            layer_state = state[i] if state is not None else None
            if building:
                layer_state = state[i] = adapter.prefill(i, x, prompt_lens)
            h = h + self.attention_forward(x, i, cache, adapter, layer_state, start, decoding)
            x = T.rms_norm(h, layer.ffn_norm, cfg.norm_eps)
            h = h + self.ffn_forward(x, i, adapter, layer_state, decoding)
        if cache is not None:
            cache.length += L
        h = T.rms_norm(h, self.final_norm, cfg.norm_eps)
        logits = h @ self.lm_head
        if squeeze:
            logits = logits[0]
        return (logits, state) if return_state else logits

    __call__ = forward

    def new_cache(self) -> KVCache:
        return KVCache(self.config.n_layers, self.config.max_seq_len)

    # -- generation --------------------------------------------------------
    def generate(self, prompt, max_new: int, beam: int = 1, adapter: Adapter | None = None,
                 return_scores: bool = False):
        """Greedy (beam=1) or beam-search continuation of ``prompt``."""
        gen = Generation(self, prompt, max_new, beam, adapter)
        while not gen.done:
            gen.step()
        return (gen.result(), gen.best_score) if return_scores else gen.result()


_IDENTITY = Adapter()


class Generation:
    """One generation request, advanced a token at a time.

    The request owns its KV cache and adapter state, so several requests
    can be interleaved over one frozen backbone.  Every generated token is
    fed back through the model once, leaving the cache holding
    ``prompt + max_new`` positions.
    """

    def __init__(self, model: Transformer, prompt, max_new: int, beam: int = 1, adapter: Adapter | None = None):
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        if beam < 1:
            raise ValueError("beam must be >= 1")
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if len(prompt) < 1:
            raise ValueError("empty prompt")
        if len(prompt) + max_new > model.config.max_seq_len:
            raise SequenceOverflowError(
                f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq_len={model.config.max_seq_len}")
        self.model = model
        self.adapter = adapter
        self.beam = beam
        self.max_new = max_new
        self.prompt = prompt
        self.cache = model.new_cache()
        self.state = None
        self.seqs = np.zeros((1, 0), dtype=np.int64)
        self.scores = np.zeros(1)
        self._logits = None
        self.n_fed = 0

    @property
    def done(self) -> bool:
        return self.n_fed >= self.max_new

    def _feed(self, tokens):
        with T.no_grad():
            logits, self.state = self.model.forward(
                tokens, adapter=self.adapter, cache=self.cache, state=self.state, return_state=True)
        self._logits = logits.data[:, -1, :].astype(np.float64)

    def step(self):
        if self._logits is None:
            self._feed(self.prompt[None, :])
            return
        logp = self._logits - self._logits.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        if self.beam == 1:
            nxt = np.argmax(logp, axis=1)  # first max -> lowest id on ties
            self.scores = self.scores + logp[np.arange(len(nxt)), nxt]
            self.seqs = np.concatenate([self.seqs, nxt[:, None]], axis=1)
        else:
            V = logp.shape[1]
            cand = (self.scores[:, None] + logp).reshape(-1)
            # stable: higher score first, then lower (beam, token) index
            order = np.lexsort((np.arange(cand.size), -cand))[: self.beam]
            src, nxt = order // V, order % V
            self.scores = cand[order]
            self.seqs = np.concatenate([self.seqs[src], nxt[:, None]], axis=1)
            if len(src) != self.cache.keys[0].shape[0] or np.any(src != np.arange(len(src))):
                self.cache.reorder(src)
        self.n_fed += 1
        self._feed(self.seqs[:, -1:])

    @property
    def best_score(self) -> float:
        return float(self.scores[0])

    def result(self) -> np.ndarray:
        return self.seqs[0].copy()
