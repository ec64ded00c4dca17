"""Synthetic pointwise-ranking task for the toy model.

Each sequence is a prompt followed by a short response::

    BOS  u_1 .. u_K  SEP  (item, YES|NO) x H  cand  |  YES|NO  cat(cand)  EOS

``u_k`` encodes the user's hidden preference level for topic ``k``.  Every
item belongs to one topic and carries a hidden bias.  A label is drawn as

    P(YES) = sigmoid(strength * level(user, topic(item)) + bias(item) + offset)

with ``offset`` chosen so the expected positive rate equals ``balance``.  The
history pairs are drawn from the same model, so they are consistent with the
user's preferences.  ``oracle_p`` keeps the true probability of each label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .model import EOS, NO, YES

BOS, SEP = 4, 5
N_SPECIAL = 6


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 64
    n_topics: int = 4
    n_levels: int = 4
    n_items: int = 24
    history_len: int = 4
    strength: float = 1.6
    item_bias_std: float = 0.5
    balance: float = 0.5

    @property
    def user_base(self) -> int:
        return N_SPECIAL

    @property
    def item_base(self) -> int:
        return N_SPECIAL + self.n_topics * self.n_levels

    @property
    def cat_base(self) -> int:
        return self.item_base + self.n_items

    @property
    def vocab_needed(self) -> int:
        return self.cat_base + self.n_topics

    @property
    def prompt_len(self) -> int:
        return 3 + self.n_topics + 2 * self.history_len

    @property
    def seq_len(self) -> int:
        return self.prompt_len + 3

    def validate(self) -> None:
        if self.vocab_needed > self.vocab_size:
            raise ValueError(
                f"vocab too small: item alphabet needs {self.vocab_needed} ids, vocab_size is {self.vocab_size}"
            )
        if not 0.0 < self.balance < 1.0:
            raise ValueError("balance must be in (0, 1)")
        if self.n_levels < 2 or self.n_topics < 1 or self.n_items < self.n_topics:
            raise ValueError("need n_levels >= 2 and n_items >= n_topics >= 1")


@dataclass
class SynthDataset:
    sequences: np.ndarray  # (N, T) int64
    labels: np.ndarray  # (N,) int {0,1}, -1 when unlabeled
    prompt_len: np.ndarray  # (N,) int
    oracle_p: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(
            self.sequences[idx],
            self.labels[idx],
            self.prompt_len[idx],
            None if self.oracle_p is None else self.oracle_p[idx],
        )

    def split(self, n_first: int):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def save(self, path) -> None:
        """One JSON record per line: tokens, prompt_len, label."""
        with open(path, "w") as f:
            for s, p, y in zip(self.sequences, self.prompt_len, self.labels):
                f.write(json.dumps({"tokens": [int(x) for x in s], "prompt_len": int(p), "label": int(y)}) + "\n")

    @classmethod
    def load(cls, path) -> "SynthDataset":
        seqs, plens, labels = [], [], []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    seqs.append(rec["tokens"])
                    plens.append(int(rec["prompt_len"]))
                    labels.append(int(rec.get("label", -1)))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise ValueError(f"{path}:{lineno}: bad dataset record ({e})") from None
        if not seqs:
            raise ValueError(f"{path}: empty dataset")
        lens = {len(s) for s in seqs}
        if len(lens) != 1:
            raise ValueError(f"{path}: sequences must share one length, got {sorted(lens)}")
        return cls(np.asarray(seqs, dtype=np.int64), np.asarray(labels), np.asarray(plens))


@dataclass
class _World:
    levels: np.ndarray  # (n_users, n_topics) level index
    item_topic: np.ndarray
    item_bias: np.ndarray
    offset: float


def _level_values(cfg: SynthConfig) -> np.ndarray:
    L = cfg.n_levels
    return (2.0 * np.arange(L) - (L - 1)) / (L - 1)  # evenly spaced in [-1, 1]


def _solve_offset(cfg: SynthConfig, item_bias: np.ndarray) -> float:
    lv = _level_values(cfg)
    logit = cfg.strength * lv[:, None] * 3 + item_bias[None, :]  # levels x items

    def rate(off):
        return float(np.mean(expit(logit + off))) - cfg.balance

    return brentq(rate, -50.0, 50.0, xtol=1e-12)


def _world(seed: int, n_users: int, cfg: SynthConfig) -> _World:
    # item world comes from a seed-independent stream so train/val/calibration sets share it
    irng = np.random.default_rng([7, cfg.n_items, cfg.n_topics])
    item_topic = np.arange(cfg.n_items) % cfg.n_topics
    item_bias = irng.normal(0.0, cfg.item_bias_std, size=cfg.n_items)
    rng = np.random.default_rng(seed)
    levels = rng.integers(0, cfg.n_levels, size=(n_users, cfg.n_topics))
    return _World(levels, item_topic, item_bias, _solve_offset(cfg, item_bias))


def _prob(cfg: SynthConfig, w: _World, user: int, items: np.ndarray) -> np.ndarray:
    lv = _level_values(cfg)[w.levels[user, w.item_topic[items]]]
    return expit(3 * cfg.strength * lv + w.item_bias[items] + w.offset)


def synth_data(seed: int, n_users: int, items_per_user: int, cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    """Deterministic dataset of ``n_users * items_per_user`` labeled sequences."""
    if n_users < 1 or items_per_user < 1:
        raise ValueError("n_users and items_per_user must be >= 1")
    cfg.validate()
    w = _world(seed, n_users, cfg)
    rng = np.random.default_rng([seed, 1])
    N = n_users * items_per_user
    seqs = np.zeros((N, cfg.seq_len), dtype=np.int64)
    labels = np.zeros(N, dtype=np.int64)
    oracle = np.zeros(N)
    row = 0
    for u in range(n_users):
        user_toks = cfg.user_base + np.arange(cfg.n_topics) * cfg.n_levels + w.levels[u]
        for _ in range(items_per_user):
            items = rng.choice(cfg.n_items, size=cfg.history_len + 1, replace=False)
            p = _prob(cfg, w, u, items)
            y = (rng.random(len(items)) < p).astype(np.int64)
            hist = np.empty(2 * cfg.history_len, dtype=np.int64)
            hist[0::2] = cfg.item_base + items[:-1]
            hist[1::2] = np.where(y[:-1] == 1, YES, NO)
            cand = items[-1]
            seqs[row] = np.concatenate(
                [
                    [BOS],
                    user_toks,
                    [SEP],
                    hist,
                    [cfg.item_base + cand],
                    [YES if y[-1] else NO, cfg.cat_base + w.item_topic[cand], EOS],
                ]
            )
            labels[row] = y[-1]
            oracle[row] = p[-1]
            row += 1
    return SynthDataset(seqs, labels, np.full(N, cfg.prompt_len), oracle)


def synth_offdomain(seed: int, n: int, cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    """Generic-text stand-in: same length, tokens uniform over the non-special ids.

    Drawn from a separate seed family and carrying no preference structure;
    used as out-of-domain calibration data.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg.validate()
    rng = np.random.default_rng([seed, 0xD0_0FF])
    seqs = rng.integers(N_SPECIAL, cfg.vocab_size, size=(n, cfg.seq_len))
    seqs[:, 0] = BOS
    seqs[:, -1] = EOS
    return SynthDataset(seqs.astype(np.int64), np.full(n, -1), np.full(n, cfg.prompt_len))


def bayes_scores(ds: SynthDataset) -> np.ndarray:
    if ds.oracle_p is None:
        raise ValueError("dataset carries no generator probabilities")
    return ds.oracle_p.copy()


class BayesOracle:
    """Scorer that knows the generator: exact P(YES) decoded from the prompt.

    Exposes ``predict_logits(tokens)`` so it can stand in for a model in
    evaluation.  The decision row holds log P(YES) / log P(NO), the next row
    puts all mass on the candidate's category, the last on EOS.  Other rows
    are uniform.
    """

    def __init__(self, cfg: SynthConfig = SynthConfig()):
        cfg.validate()
        self.cfg = cfg
        self.world = _world(0, 1, cfg)

    def p_yes(self, tokens) -> np.ndarray:
        cfg, w = self.cfg, self.world
        tok = np.asarray(tokens, dtype=np.int64)
        P = cfg.prompt_len
        user = tok[:, 1 : 1 + cfg.n_topics] - cfg.user_base
        levels = user - np.arange(cfg.n_topics) * cfg.n_levels
        if np.any((levels < 0) | (levels >= cfg.n_levels)):
            raise ValueError("prompt does not encode a user")
        cand = tok[:, P - 1] - cfg.item_base
        if np.any((cand < 0) | (cand >= cfg.n_items)):
            raise ValueError("prompt does not end in a candidate item")
        lv = _level_values(cfg)[levels[np.arange(len(tok)), w.item_topic[cand]]]
        return expit(3 * cfg.strength * lv + w.item_bias[cand] + w.offset)

    def predict_logits(self, tokens) -> np.ndarray:
        cfg = self.cfg
        tok = np.asarray(tokens, dtype=np.int64)
        B, T = tok.shape
        P = cfg.prompt_len
        out = np.zeros((B, T, cfg.vocab_size))
        floor = -1e4
        p = self.p_yes(tok)
        dec = np.full((B, cfg.vocab_size), floor)
        dec[:, YES] = np.log(p)
        dec[:, NO] = np.log1p(-p)
        out[:, P - 1] = dec
        if T > P + 1:
            cat = cfg.cat_base + self.world.item_topic[tok[:, P - 1] - cfg.item_base]
            out[:, P] = floor
            out[np.arange(B), P, cat] = 0.0
        if T > P + 2:
            out[:, P + 1] = floor
            out[:, P + 1, EOS] = 0.0
        return out
