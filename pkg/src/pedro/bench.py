"""Inference-efficiency harness: tokens/s plus instrumented adapter counters.

``tokens_per_second`` is end to end (prefill included), generated tokens
over request wall time.  ``decode_tokens_per_second`` times the decode
steps alone.

Wall-clock numbers depend on the machine; the counters (adapter
invocations and extra multiply-accumulates per decode step) do not, and
carry the latency argument on their own.
"""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import Adapter, Generation, SequenceOverflowError, Transformer

NOISY_CV = 0.10


@dataclass
class BenchReport:
    adapter: str
    beam: int
    prompt_len: int
    gen_len: int
    trials: int
    tokens_per_second: float
    decode_tokens_per_second: float
    tps_cv: float
    noisy: bool
    adapter_invocations_prefill: int
    adapter_invocations_decode: int
    extra_mac_per_decode_step: float
    peak_live_parameter_bytes: int
    trainable_params: int

    def to_dict(self) -> dict:
        return asdict(self)


def _param_bytes(model: Transformer, adapter: Adapter | None) -> int:
    n = sum(p.data.nbytes for p in model.parameters())
    if adapter is not None:
        n += sum(p.data.nbytes for p in adapter.parameters())
    return n


def _state_bytes(state) -> int:
    if not state:
        return 0
    return sum(v.data.nbytes for layer in state if layer for v in layer.values())


def run_request(model: Transformer, prompt, gen_len: int, beam: int, adapter: Adapter | None,
                timings: dict | None = None):
    """Generate once; returns (elapsed seconds, Generation).

    ``timings``, if given, receives the prefill and decode split.
    """
    t0 = time.perf_counter()
    gen = Generation(model, prompt, gen_len, beam, adapter)
    gen.step()
    t1 = time.perf_counter()
    while not gen.done:
        gen.step()
    t2 = time.perf_counter()
    if timings is not None:
        timings["prefill"] = t1 - t0
        timings["decode"] = t2 - t1
    return t2 - t0, gen


def bench_prompt(model: Transformer, prompt_len: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(3, model.config.vocab_size, size=prompt_len)


def _counters(model, adapter, prompt, gen_len, beam):
    if adapter is not None:
        adapter.reset_counters()
    _, gen = run_request(model, prompt, gen_len, beam, adapter)
    if adapter is None:
        return 0, 0, 0.0, gen
    c = adapter.counters
    macs = c.get("extra_macs_decode", 0) / (gen_len * beam)
    return c["prefill"], c["decode"], macs, gen


def run_bench_suite(model: Transformer, adapters: dict[str, Adapter | None], prompt_len: int = 256,
                    gen_len: int = 32, beam: int = 1, trials: int = 7, warmup: int = 2,
                    seed: int = 0) -> dict[str, BenchReport]:
    """Benchmark several adapters over one backbone, interleaving trials round-robin.

    Interleaving spreads slow machine phases evenly across adapters.
    Warmup trials are run and discarded.
    """
    if prompt_len + gen_len > model.config.max_seq_len:
        raise SequenceOverflowError(
            f"prompt_len + gen_len = {prompt_len + gen_len} exceeds max_seq_len={model.config.max_seq_len}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    prompt = bench_prompt(model, prompt_len, seed)
    times: dict[str, list[float]] = {k: [] for k in adapters}
    decode_times: dict[str, list[float]] = {k: [] for k in adapters}
    # like timeit, keep the cyclic collector out of the timed region
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for i in range(warmup + trials):
            for name, ad in adapters.items():
                split: dict = {}
                dt, _ = run_request(model, prompt, gen_len, beam, ad, split)
                if i >= warmup:
                    times[name].append(dt)
                    decode_times[name].append(split["decode"])
    finally:
        if gc_was_enabled:
            gc.enable()
    out = {}
    for name, ad in adapters.items():
        pre, dec, macs, gen = _counters(model, ad, prompt, gen_len, beam)
        tps = [gen_len / t for t in times[name]]
        med = statistics.median(tps)
        cv = statistics.pstdev(tps) / statistics.mean(tps) if len(tps) > 1 else 0.0
        peak = _param_bytes(model, ad) + gen.cache.nbytes() + _state_bytes(gen.state)
        out[name] = BenchReport(
            adapter=getattr(ad, "kind", "none") if ad is not None else "none",
            beam=beam, prompt_len=prompt_len, gen_len=gen_len, trials=trials,
            tokens_per_second=med, decode_tokens_per_second=statistics.median(gen_len / t for t in decode_times[name]),
            tps_cv=cv, noisy=cv > NOISY_CV,
            adapter_invocations_prefill=pre, adapter_invocations_decode=dec,
            extra_mac_per_decode_step=macs, peak_live_parameter_bytes=int(peak),
            trainable_params=sum(p.data.size for p in ad.parameters()) if ad is not None else 0,
        )
    return out


def run_bench(model: Transformer, adapter: Adapter | None, prompt_len: int = 256, gen_len: int = 32,
              beam: int = 1, trials: int = 7, warmup: int = 2, seed: int = 0) -> BenchReport:
    name = adapter.kind if adapter is not None else "none"
    return run_bench_suite(model, {name: adapter}, prompt_len, gen_len, beam, trials, warmup, seed)[name]


def serve_interleaved(model: Transformer, requests):
    """Serve (prompt, max_new, beam, adapter) requests over one backbone, one step each in turn."""
    gens = [Generation(model, p, n, b, ad) for p, n, b, ad in requests]
    while not all(g.done for g in gens):
        for g in gens:
            if not g.done:
                g.step()
    return [g.result() for g in gens]
