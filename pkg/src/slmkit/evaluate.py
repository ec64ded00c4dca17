"""Validation metrics: response-token cross-entropy and decision-token AUC."""

from __future__ import annotations

from typing import Dict, Iterable

import numpy as np

from .toylm.data import SynthDataset
from .toylm.metrics import auc
from .toylm.model import NO, YES, ToyModel, forward, log_softmax


def response_rows(prompt_len: int, T: int) -> slice:
    """Logit rows that predict response tokens (row t predicts token t + 1)."""
    return slice(prompt_len - 1, T - 1)


def _logits(model, tokens: np.ndarray) -> np.ndarray:
    if hasattr(model, "predict_logits"):
        return model.predict_logits(tokens)
    return forward(model, tokens).logits


def evaluate(model, dataset: SynthDataset, metrics: Iterable[str] = ("loss", "auc"),
             batch_size: int = 256) -> Dict[str, float]:
    """Mean response-token CE and AUC of the restricted-softmax P(YES).

    ``model`` is a ToyModel or any object with ``predict_logits(tokens)``
    returning ``(B, T, V)`` logits.  Scoring is one forward pass; nothing is
    generated.
    """
    metrics = tuple(metrics)
    for m in metrics:
        if m not in ("loss", "auc"):
            raise ValueError(f"unknown metric {m!r}")
    if "auc" in metrics and not dataset.labeled:
        raise ValueError("AUC requested on unlabeled data")
    plens = np.unique(dataset.prompt_len)
    if len(plens) != 1:
        raise ValueError("dataset must have a single prompt length")
    P = int(plens[0])
    seqs = dataset.sequences
    T = seqs.shape[1]
    rows = response_rows(P, T)
    ce_sum, ce_n = 0.0, 0
    scores = []
    for start in range(0, len(seqs), batch_size):
        tok = seqs[start : start + batch_size]
        logits = _logits(model, tok)
        if "loss" in metrics:
            lp = log_softmax(logits[:, rows, :], axis=-1)
            tgt = tok[:, P:T]
            ce_sum -= float(np.sum(np.take_along_axis(lp, tgt[..., None], axis=-1)))
            ce_n += tgt.size
        if "auc" in metrics:
            dec = logits[:, P - 1, :]
            scores.append(dec[:, YES] - dec[:, NO])  # monotone in the restricted-softmax P(YES)
    out: Dict[str, float] = {}
    if "loss" in metrics:
        out["loss"] = ce_sum / ce_n
    if "auc" in metrics:
        out["auc"] = auc(np.concatenate(scores), dataset.labels)
    return out


def p_yes(model: ToyModel, dataset: SynthDataset) -> np.ndarray:
    P = int(dataset.prompt_len[0])
    dec = _logits(model, dataset.sequences)[:, P - 1, :]
    return 1.0 / (1.0 + np.exp(-(dec[:, YES] - dec[:, NO])))
