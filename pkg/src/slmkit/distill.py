"""Knowledge distillation: divergences, the mixed KD objective, and training loops.

Per position the loss mixes a teacher/student divergence with cross-entropy
against the ground-truth token; response and prompt positions are averaged
separately and combined as ``(1 - prompt_weight) * L_resp + prompt_weight *
L_prompt``.  Training is minibatch SGD with linear warmup, cosine decay and
global-norm clipping.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .evaluate import evaluate
from .toylm.data import SynthDataset
from .toylm.generate import generate_batch
from .toylm.model import EOS, PAD, ToyModel, backward_from, forward, forward_train, log_softmax, softmax

log = logging.getLogger(__name__)


class Divergence(str, enum.Enum):
    FKL = "fkl"
    RKL = "rkl"
    JSD = "jsd"


class PromptTermWarning(UserWarning):
    pass


@dataclass
class TokenDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("probabilities must be non-negative and sum to 1")
        self.probs = p

    @classmethod
    def from_logits(cls, logits, temperature: float = 1.0) -> "TokenDistribution":
        return cls(softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=-1))


@dataclass
class KDLossConfig:
    divergence: Divergence = Divergence.FKL
    beta: float = 0.5
    kd_weight: float = 0.9
    ce_weight: float = 0.1
    prompt_weight: float = 0.05
    temperature: float = 1.0
    epsilon_floor: float = 1e-12

    def __post_init__(self):
        self.divergence = Divergence(self.divergence)

    def validate(self) -> None:
        if not math.isclose(self.kd_weight + self.ce_weight, 1.0, abs_tol=1e-12):
            raise ValueError(f"kd_weight + ce_weight must be 1, got {self.kd_weight + self.ce_weight}")
        if not 0.0 <= self.prompt_weight <= 1.0:
            raise ValueError("prompt_weight must be in [0, 1]")
        if self.divergence == Divergence.JSD and not 0.0 < self.beta < 1.0:
            raise ValueError("JSD beta must be in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def sft(cls, prompt_weight: float = 0.05) -> "KDLossConfig":
        return cls(kd_weight=0.0, ce_weight=1.0, prompt_weight=prompt_weight)


@dataclass
class SamplingSchedule:
    fr: float = 0.0
    tk: int = 4
    temperature: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.fr <= 1.0:
            raise ValueError("on-policy fraction fr must be in [0, 1]")
        if self.tk < 1:
            raise ValueError("tk must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _probs(x) -> np.ndarray:
    return x.probs if isinstance(x, TokenDistribution) else np.asarray(x, dtype=np.float64)


def _xlogy_ratio(a, b, eps):
    """sum a * log(a / b) with 0 log 0 = 0 and floored logs."""
    return np.sum(np.where(a > 0, a * (np.log(np.maximum(a, eps)) - np.log(np.maximum(b, eps))), 0.0), axis=-1)


def divergence(kind, p, q, beta: float = 0.5, eps: float = 1e-12):
    """FKL(p||q), RKL = KL(q||p), or JSD(beta) with mixture m = beta p + (1 - beta) q.

    Works row-wise on ``(..., V)`` arrays.
    """
    kind = Divergence(kind)
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ValueError(f"vocabulary mismatch: {p.shape} vs {q.shape}")
    if kind == Divergence.FKL:
        d = _xlogy_ratio(p, q, eps)
    elif kind == Divergence.RKL:
        d = _xlogy_ratio(q, p, eps)
    else:
        if not 0.0 < beta < 1.0:
            raise ValueError("JSD beta must be in (0, 1)")
        m = beta * p + (1.0 - beta) * q
        d = beta * _xlogy_ratio(p, m, eps) + (1.0 - beta) * _xlogy_ratio(q, m, eps)
    d = np.maximum(d, 0.0)
    return float(d) if np.ndim(d) == 0 else d


def divergence_grad(kind, p, student_logits, beta: float = 0.5, eps: float = 1e-12, temperature: float = 1.0):
    """Gradient of the divergence w.r.t. the student logits, ``q = softmax(z / T)``.

    FKL gives ``q - p``.  For RKL and JSD the gradient w.r.t. ``q`` is
    ``log(q/p)`` (+1, which cancels) and ``(1 - beta) log(q/m)``; both go
    through the softmax Jacobian ``q * (g - <q, g>)``.
    """
    kind = Divergence(kind)
    p = _probs(p)
    z = np.asarray(student_logits, dtype=np.float64)
    if p.shape != z.shape:
        raise ValueError(f"vocabulary mismatch: {p.shape} vs {z.shape}")
    q = softmax(z / temperature, axis=-1)
    if kind == Divergence.FKL:
        g = q - p
    else:
        lq = np.log(np.maximum(q, eps))
        if kind == Divergence.RKL:
            gq = lq - np.log(np.maximum(p, eps))
        else:
            m = beta * p + (1.0 - beta) * q
            gq = (1.0 - beta) * (lq - np.log(np.maximum(m, eps)))
        g = q * (gq - np.sum(q * gq, axis=-1, keepdims=True))
    return g / temperature


def _ce_and_grad(logits, labels):
    """Per-position CE and its logit gradient; label < 0 -> zero."""
    lp = log_softmax(logits, axis=-1)
    has = labels >= 0
    safe = np.where(has, labels, 0)
    ce = -np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
    g = np.exp(lp)
    np.put_along_axis(g, safe[..., None], np.take_along_axis(g, safe[..., None], axis=-1) - 1.0, axis=-1)
    return np.where(has, ce, 0.0), np.where(has[..., None], g, 0.0)


def kd_loss_batch(teacher_logits, student_logits, labels, resp_mask, prompt_mask, cfg: KDLossConfig):
    """Batched mixed loss.  Arrays are ``(B, T, V)`` / ``(B, T)``; returns (loss, dlogits).

    The loss is the mean over sequences of each sequence's mixed loss.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    B = z.shape[0]
    per_pos = np.zeros(z.shape[:2])
    grad = np.zeros_like(z)
    if cfg.kd_weight > 0:
        p = softmax(np.asarray(teacher_logits, dtype=np.float64) / cfg.temperature, axis=-1)
        q = softmax(z / cfg.temperature, axis=-1)
        per_pos += cfg.kd_weight * divergence(cfg.divergence, p, q, cfg.beta, cfg.epsilon_floor)
        grad += cfg.kd_weight * divergence_grad(cfg.divergence, p, z, cfg.beta, cfg.epsilon_floor, cfg.temperature)
    if cfg.ce_weight > 0:
        ce, gce = _ce_and_grad(z, labels)
        per_pos += cfg.ce_weight * ce
        grad += cfg.ce_weight * gce
    n_resp = resp_mask.sum(axis=1)
    n_prompt = prompt_mask.sum(axis=1)
    w_resp = np.where(n_resp > 0, (1.0 - cfg.prompt_weight) / np.maximum(n_resp, 1), 0.0)
    w_prompt = np.where(n_prompt > 0, cfg.prompt_weight / np.maximum(n_prompt, 1), 0.0)
    w = (resp_mask * w_resp[:, None] + prompt_mask * w_prompt[:, None]) / B
    loss = float(np.sum(per_pos * w))
    return loss, grad * w[..., None]


def kd_sequence_loss(teacher_logits, student_logits, labels, prompt_len: int, cfg: KDLossConfig,
                     mask=None) -> Tuple[float, np.ndarray]:
    """Mixed KD loss of one sequence; rows ``t < prompt_len`` are prompt rows.

    ``labels[t]`` is the target of row ``t`` (``-1``: no CE term there);
    ``mask`` drops rows entirely.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    T = z.shape[0]
    if teacher_logits is not None and np.shape(teacher_logits) != z.shape:
        raise ValueError("teacher and student logits must have the same shape")
    if not 0 <= prompt_len < T:
        raise ValueError(f"prompt_len must be in [0, {T - 1}]")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (T,):
        raise ValueError(f"labels must have length {T}")
    keep = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if prompt_len == 0 and cfg.prompt_weight > 0:
        warnings.warn("prompt_len = 0: prompt term set to 0", PromptTermWarning, stacklevel=2)
    pos = np.arange(T)
    resp = (pos >= prompt_len) & keep
    prompt = (pos < prompt_len) & keep
    t = None if teacher_logits is None else np.asarray(teacher_logits)[None]
    loss, g = kd_loss_batch(t, z[None], labels[None], resp[None].astype(float), prompt[None].astype(float), cfg)
    return loss, g[0]


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    tokens: np.ndarray  # (N, P + R)
    prompt_len: int
    labels: np.ndarray  # (N, P + R) targets per logit row, -1 where none
    resp_mask: np.ndarray  # (N, P + R) float
    prompt_mask: np.ndarray
    on_policy: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompts(self) -> np.ndarray:
        return self.tokens[:, : self.prompt_len]

    @property
    def responses(self) -> np.ndarray:
        return self.tokens[:, self.prompt_len :]


def _masks(tokens: np.ndarray, P: int, on_policy: np.ndarray, gt_first: Optional[np.ndarray]):
    N, L = tokens.shape
    labels = np.full((N, L), -1, dtype=np.int64)
    labels[:, : L - 1] = tokens[:, 1:]
    rows = np.arange(L)[None, :]
    prompt_mask = ((rows < P - 1) & np.ones((N, 1), bool)).astype(float)
    # response rows predict tokens P..; rows predicting padding after EOS are dropped
    tgt = np.concatenate([tokens[:, 1:], np.full((N, 1), PAD)], axis=1)
    after_eos = np.zeros((N, L), dtype=bool)
    resp_tok = tokens[:, P:]
    eos_seen = np.cumsum(resp_tok == EOS, axis=1) > 0
    prev_eos = np.concatenate([np.zeros((N, 1), bool), eos_seen[:, :-1]], axis=1)
    after_eos[:, P - 1 : L - 1] = prev_eos
    resp_mask = (rows >= P - 1) & (rows < L - 1) & ~after_eos & ~((tgt == PAD) & (rows >= P - 1))
    # the first response row depends only on the prompt, so it is supervised even if the student emitted PAD
    resp_mask[:, P - 1] = True
    resp_mask = resp_mask.astype(float)
    if gt_first is not None and np.any(on_policy):
        # on-policy rows keep CE only on the first response row, against the ground-truth token
        labels[on_policy, P - 1 + 1 :] = -1
        labels[on_policy, P - 1] = gt_first[on_policy]
    labels[resp_mask + prompt_mask == 0] = -1
    return labels, resp_mask, prompt_mask


def batch_from_dataset(ds: SynthDataset) -> Batch:
    P = int(ds.prompt_len[0])
    tok = ds.sequences.copy()
    on = np.zeros(len(tok), dtype=bool)
    labels, rm, pm = _masks(tok, P, on, None)
    return Batch(tok, P, labels, rm, pm, on)


def build_batch(dataset: SynthDataset, student: ToyModel, schedule: SamplingSchedule, seed: Optional[int] = None) -> Batch:
    """Mix ground-truth and student-generated responses.

    Each sequence independently (probability ``fr``) gets its response
    regenerated by the student, capped at ``tk`` tokens.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    schedule.validate()
    rng = np.random.default_rng(schedule.seed if seed is None else seed)
    P = int(dataset.prompt_len[0])
    if np.any(dataset.prompt_len != P):
        raise ValueError("dataset must have a single prompt length")
    gt = dataset.sequences
    on = rng.random(len(gt)) < schedule.fr
    if not np.any(on):
        return batch_from_dataset(dataset)
    gen, _ = generate_batch(student, gt[on, :P], schedule.temperature, schedule.tk, rng=rng)
    R = max(gt.shape[1] - P, gen.shape[1])
    tok = np.full((len(gt), P + R), PAD, dtype=np.int64)
    tok[:, : gt.shape[1]] = gt
    tok[on, P:] = PAD
    tok[on, P : P + gen.shape[1]] = gen
    labels, rm, pm = _masks(tok, P, on, gt[:, P])
    return Batch(tok, P, labels, rm, pm, on)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class OptimizerParams:
    lr: float = 0.1
    warmup_steps: int = 20
    min_lr_frac: float = 0.05
    clip_norm: float = 1.0
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0


class DivergenceError(RuntimeError):
    pass


class Trainer:
    """SGD state for one student across epochs (and across the two stages)."""

    def __init__(self, student: ToyModel, opt: OptimizerParams, total_steps: int):
        self.student = student
        self.opt = opt
        self.total_steps = max(int(total_steps), 1)
        self.step = 0
        self.velocity: Dict[str, np.ndarray] = {}
        self._teacher_cache: Dict[bytes, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        o = self.opt
        if o.warmup_steps > 0 and step < o.warmup_steps:
            return o.lr * (step + 1) / o.warmup_steps
        span = max(self.total_steps - o.warmup_steps, 1)
        frac = min(max(step - o.warmup_steps, 0) / span, 1.0)
        return o.lr * (o.min_lr_frac + (1 - o.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))

    def teacher_logits(self, teacher: ToyModel, batch: Batch, idx: np.ndarray) -> np.ndarray:
        tok = batch.tokens[idx]
        on = batch.on_policy[idx]
        if np.any(on):
            return forward(teacher, tok).logits
        keys = [row.tobytes() for row in tok]
        missing = [i for i, k in enumerate(keys) if k not in self._teacher_cache]
        if missing:
            fresh = forward(teacher, tok[missing]).logits
            for j, i in enumerate(missing):
                self._teacher_cache[keys[i]] = fresh[j]
        return np.stack([self._teacher_cache[k] for k in keys])

    def train_step(self, teacher: Optional[ToyModel], batch: Batch, idx: np.ndarray, cfg: KDLossConfig) -> float:
        tok = batch.tokens[idx]
        logits, rec = forward_train(self.student, tok)
        t_logits = self.teacher_logits(teacher, batch, idx) if cfg.kd_weight > 0 else None
        loss, dlog = kd_loss_batch(t_logits, logits, batch.labels[idx], batch.resp_mask[idx], batch.prompt_mask[idx], cfg)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.step}")
        grads = backward_from(self.student, rec, dlog)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not np.isfinite(norm):
            raise DivergenceError(f"non-finite gradient at step {self.step}")
        clip = min(1.0, self.opt.clip_norm / norm) if norm > 0 and self.opt.clip_norm > 0 else 1.0
        lr = self.lr_at(self.step)
        if lr != 0.0:
            mu = self.opt.momentum
            for name, g in grads.items():
                g = g * clip
                if mu > 0:
                    v = self.velocity.get(name)
                    v = g if v is None else mu * v + g
                    self.velocity[name] = v
                    g = v
                self.student.tensors[name] -= lr * g
        self.step += 1
        return loss


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def distill_epoch(trainer: Trainer, teacher: Optional[ToyModel], train: SynthDataset, val: SynthDataset,
                  cfg: KDLossConfig, schedule: Optional[SamplingSchedule] = None, epoch: int = 0) -> Dict[str, float]:
    """One pass over ``train``; on-policy responses are regenerated per minibatch."""
    cfg.validate()
    if teacher is not None and teacher.config.vocab_size != trainer.student.config.vocab_size:
        raise ValueError("teacher and student must share the vocabulary")
    if cfg.kd_weight > 0 and teacher is None:
        raise ValueError("a teacher is required when kd_weight > 0")
    rng = np.random.default_rng([trainer.opt.seed, epoch])
    on_policy = schedule is not None and schedule.fr > 0
    base = None if on_policy else batch_from_dataset(train)
    losses, last_finite = [], None
    for k, idx in enumerate(_minibatches(len(train), trainer.opt.batch_size, rng)):
        if on_policy:
            sub = train.subset(idx)
            batch = build_batch(sub, trainer.student, schedule, seed=int(rng.integers(2**63)))
            local = np.arange(len(idx))
        else:
            batch, local = base, idx
        try:
            loss = trainer.train_step(teacher, batch, local, cfg)
        except DivergenceError as e:
            raise DivergenceError(f"{e}; last finite train loss {last_finite} (epoch {epoch}, batch {k})") from None
        losses.append(loss)
        last_finite = loss
    m = evaluate(trainer.student, val)
    return {"train_loss": float(np.mean(losses)), "val_loss": m["loss"], "val_auc": m["auc"]}


@dataclass
class TrainResult:
    best: ToyModel
    final: ToyModel
    history: List[Dict] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return min(h["val_loss"] for h in self.history) if self.history else float("nan")

    @property
    def best_record(self) -> Dict:
        return min(self.history, key=lambda h: (h["val_loss"], self.history.index(h)))


def train(student: ToyModel, teacher: Optional[ToyModel], train_ds: SynthDataset, val_ds: SynthDataset,
          cfg: KDLossConfig, epochs: int, opt: OptimizerParams, schedule: Optional[SamplingSchedule] = None,
          stage: str = "train", trainer: Optional[Trainer] = None) -> TrainResult:
    """Train a copy of ``student``; ``best`` is the min-val-loss epoch (ties -> earlier)."""
    model = student.copy()
    steps = epochs * math.ceil(len(train_ds) / opt.batch_size)
    trainer = Trainer(model, opt, steps) if trainer is None else trainer
    history: List[Dict] = []
    best, best_loss = model.copy(), math.inf
    for e in range(epochs):
        m = distill_epoch(trainer, teacher, train_ds, val_ds, cfg, schedule, epoch=e)
        m.update(stage=stage, epoch=e)
        history.append(m)
        log.info("%s epoch %d: %s", stage, e, m)
        if m["val_loss"] < best_loss:
            best, best_loss = model.copy(), m["val_loss"]
    return TrainResult(best, model, history)


def two_stage_train(student: ToyModel, teacher: ToyModel, train_ds: SynthDataset, val_ds: SynthDataset,
                    stage1: KDLossConfig, stage2: Tuple[KDLossConfig, SamplingSchedule],
                    epochs: Tuple[int, int], opt: OptimizerParams) -> TrainResult:
    """Word-level KD, then on-policy KD started from the best stage-1 checkpoint."""
    cfg2, sched = stage2
    sched.validate()
    if sched.fr <= 0 and epochs[1] > 0:
        raise ValueError("stage 2 needs an on-policy fraction fr > 0")
    r1 = train(student, teacher, train_ds, val_ds, stage1, epochs[0], opt, stage="stage1")
    if epochs[1] == 0:
        return r1
    r2 = train(r1.best, teacher, train_ds, val_ds, cfg2, epochs[1], opt, schedule=sched, stage="stage2")
    history = r1.history + r2.history
    best = r2.best if r2.best_val_loss < r1.best_val_loss else r1.best
    return TrainResult(best, r2.final, history)


RECIPES = ("sft", "fkl", "rkl", "jsd", "fkl-ofkl", "sft-ofkl")


def recipe_configs(name: str, beta: float = 0.5, prompt_weight: float = 0.05) -> Tuple[KDLossConfig, Optional[KDLossConfig]]:
    """Stage-1 loss config and optional on-policy stage-2 loss config for a CLI recipe name."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; expected one of {RECIPES}")
    first = name.split("-")[0]
    if first == "sft":
        s1 = KDLossConfig.sft(prompt_weight)
    else:
        s1 = KDLossConfig(divergence=Divergence(first), beta=beta, prompt_weight=prompt_weight)
    s2 = KDLossConfig(divergence=Divergence.FKL, prompt_weight=prompt_weight) if name.endswith("-ofkl") else None
    return s1, s2
