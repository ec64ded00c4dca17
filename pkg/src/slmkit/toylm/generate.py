from __future__ import annotations

import warnings
from typing import List, Optional, Tuple

import numpy as np

from .model import EOS, PAD, KVCache, ToyModel, forward, softmax


class ContextTruncated(UserWarning):
    pass


def _pick(logits: np.ndarray, temperature: float, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Next-token choice per row of ``logits`` (B, V)."""
    if temperature == 0:
        return np.argmax(logits, axis=-1)  # first max -> lowest token id
    p = softmax(logits / temperature, axis=-1)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    idx = np.array([np.searchsorted(cdf[b], u[b], side="right") for b in range(len(u))])
    return np.minimum(idx, logits.shape[-1] - 1)


def generate_batch(
    model: ToyModel,
    prompts,
    temperature: float,
    max_tokens: int,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
) -> Tuple[np.ndarray, bool]:
    """Decode equal-length prompts ``(B, P)`` together with a KV cache.

    Returns ``(responses, truncated)``; ``responses`` is ``(B, n)`` with rows
    padded by PAD after their EOS.  ``truncated`` is True when the context
    limit cut decoding short of ``max_tokens``.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2 or prompts.shape[1] == 0:
        raise ValueError("prompts must be a nonempty (B, P) array")
    if rng is None:
        rng = np.random.default_rng(seed)
    B, P = prompts.shape
    budget = model.config.max_seq_len - P
    n = min(max_tokens, budget + 1) if budget >= 0 else 0
    truncated = n < max_tokens
    out = np.full((B, max(n, 0)), PAD, dtype=np.int64)
    if n <= 0:
        return out, truncated
    res = forward(model, prompts)
    cache: KVCache = res.cache
    last = res.logits[:, -1, :]
    done = np.zeros(B, dtype=bool)
    for step in range(n):
        nxt = _pick(last, temperature, rng)
        nxt = np.where(done, PAD, nxt)
        out[:, step] = nxt
        done |= nxt == EOS
        if done.all() or step == n - 1:
            out = out[:, : step + 1]
            break
        res = forward(model, nxt[:, None], cache=cache)
        cache = res.cache
        last = res.logits[:, -1, :]
    return out, truncated


def generate(
    model: ToyModel,
    prompt,
    temperature: float = 0.0,
    max_tokens: int = 16,
    seed: Optional[int] = None,
) -> List[int]:
    """Sample a continuation of ``prompt``; stops at EOS (kept) or ``max_tokens``."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if len(prompt) > model.config.max_seq_len:
        raise ValueError(f"prompt of {len(prompt)} tokens exceeds max_seq_len {model.config.max_seq_len}")
    out, truncated = generate_batch(model, [prompt], temperature, max_tokens, seed=seed)
    if truncated:
        warnings.warn(
            f"generation truncated at {out.shape[1]} tokens by max_seq_len {model.config.max_seq_len}",
            ContextTruncated,
            stacklevel=2,
        )
    toks = [int(x) for x in out[0]]
    if EOS in toks:
        toks = toks[: toks.index(EOS) + 1]
    return toks
