"""Prefill/decode timing harness for the toy model.

A workload is ``k`` prompts of ``context_len`` tokens sharing a prefix.  Cold
mode prefills every prompt from scratch; hot mode prefills the first prompt
in full and serves the rest from its prefix KV cache, computing only the
suffix.  Times are wall-clock on a monotonic clock, warmup runs discarded.
Only ratios between runs on the same machine mean anything.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np

from ..toylm.data import N_SPECIAL
from ..toylm.model import KVCache, ToyModel, forward, new_profile


@dataclass
class BenchEntry:
    prompt: int
    hot: bool
    ttft_ms: float  # median over repeats


@dataclass
class BenchReport:
    context_len: int
    k_candidates: int
    hot: bool
    prefix_len: int
    repeats: int
    p50_ttft_ms: float
    p99_ttft_ms: float
    decode_ms_per_token: float
    split_ms: Dict[str, float]
    block_total_ms: float
    entries: List[BenchEntry] = field(default_factory=list)

    @property
    def n_hot(self) -> int:
        return sum(e.hot for e in self.entries)

    def mean_ttft(self, hot: bool) -> float:
        xs = [e.ttft_ms for e in self.entries if e.hot == hot]
        return float(np.mean(xs)) if xs else float("nan")

    def check(self) -> None:
        if not 0.0 <= self.p50_ttft_ms <= self.p99_ttft_ms:
            raise AssertionError(f"need 0 <= p50 <= p99, got {self.p50_ttft_ms}, {self.p99_ttft_ms}")
        if sum(self.split_ms.values()) > 1.05 * self.block_total_ms:
            raise AssertionError("latency split exceeds the measured block time")

    def to_dict(self) -> dict:
        return asdict(self)


def _workload(model: ToyModel, context_len: int, k: int, prefix_len: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    V = model.config.vocab_size
    prefix = rng.integers(N_SPECIAL, V, size=prefix_len)
    suffixes = rng.integers(N_SPECIAL, V, size=(k, context_len - prefix_len))
    return np.concatenate([np.broadcast_to(prefix, (k, prefix_len)), suffixes], axis=1)


def _prefix_cache(cache: KVCache, n: int) -> KVCache:
    return KVCache([c[:, :n] for c in cache.keys], [c[:, :n] for c in cache.values])


def _serve(model: ToyModel, prompts: np.ndarray, prefix_len: int, hot: bool) -> List[float]:
    """Prefill every prompt once; returns per-prompt TTFT in seconds."""
    times = []
    shared = None
    for j, p in enumerate(prompts):
        t0 = time.perf_counter()
        if hot and shared is not None:
            forward(model, p[prefix_len:], cache=shared)
        else:
            res = forward(model, p)
            if hot:
                shared = _prefix_cache(res.cache, prefix_len)
        times.append(time.perf_counter() - t0)
    return times


def bench(model: ToyModel, context_len: int, k_candidates: int = 4, hot: bool = False, repeats: int = 5,
          warmup: int = 1, prefix_frac: float = 0.9, decode_tokens: int = 8, seed: int = 0) -> BenchReport:
    if context_len < 2:
        raise ValueError("context_len must be >= 2")
    if context_len + decode_tokens > model.config.max_seq_len:
        raise ValueError(
            f"context_len + decode_tokens = {context_len + decode_tokens} exceeds max_seq_len {model.config.max_seq_len}"
        )
    if k_candidates < 1 or repeats < 1:
        raise ValueError("k_candidates and repeats must be >= 1")
    prefix_len = min(max(int(round(prefix_frac * context_len)), 1), context_len - 1)
    prompts = _workload(model, context_len, k_candidates, prefix_len, seed)

    samples = []
    for r in range(warmup + repeats):
        t = _serve(model, prompts, prefix_len, hot)
        if r >= warmup:
            samples.append(t)
    per_prompt = np.median(np.asarray(samples), axis=0) * 1e3
    entries = [BenchEntry(j, bool(hot and j > 0), float(per_prompt[j])) for j in range(k_candidates)]
    flat = np.asarray(samples).ravel() * 1e3

    # latency split from instrumented full prefills; medians over repeats
    splits, totals = [], []
    for r in range(warmup + repeats):
        prof = new_profile()
        t0 = time.perf_counter()
        res = forward(model, prompts[0], profile=prof)
        dt = time.perf_counter() - t0
        if r >= warmup:
            splits.append(prof.totals)
            totals.append(dt)
    split = {name: float(np.median([s[name] for s in splits]) * 1e3) for name in ("attention", "mlp", "other")}

    # decode: greedy steps on top of the first prompt's cache
    steps = []
    cache = res.cache
    tok = int(np.argmax(res.logits[-1]))
    for _ in range(decode_tokens):
        t0 = time.perf_counter()
        out = forward(model, np.array([tok]), cache=cache)
        steps.append(time.perf_counter() - t0)
        cache, tok = out.cache, int(np.argmax(out.logits[-1]))

    return BenchReport(
        context_len=context_len,
        k_candidates=k_candidates,
        hot=hot,
        prefix_len=prefix_len,
        repeats=repeats,
        p50_ttft_ms=float(np.percentile(flat, 50)),
        p99_ttft_ms=float(np.percentile(flat, 99)),
        decode_ms_per_token=float(np.median(steps) * 1e3) if steps else 0.0,
        split_ms=split,
        block_total_ms=float(np.median(totals) * 1e3),
        entries=entries,
    )
