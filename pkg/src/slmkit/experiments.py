"""Seeded desk-scale experiments: the shared setup and one function per comparison.

Every function is deterministic for a fixed seed and returns plain dicts of
numbers so the acceptance tests and ``scripts/`` can both use them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional

import numpy as np

from .distill import (
    KDLossConfig,
    OptimizerParams,
    SamplingSchedule,
    TrainResult,
    train,
    two_stage_train,
)
from .evaluate import evaluate
from .prune import gradual_schedule, prune_model_heads, prune_model_mlp
from .quant import Scheme, quantize_model
from .toylm.data import SynthConfig, SynthDataset, synth_data, synth_offdomain
from .toylm.model import ModelConfig, ToyModel, init_model

log = logging.getLogger(__name__)

SEED = 21


@dataclass(frozen=True)
class Setup:
    seed: int = SEED
    synth: SynthConfig = SynthConfig()
    train_users: int = 200
    val_users: int = 200
    teacher_users: int = 800
    items_per_user: int = 5
    calib_n: int = 512
    teacher_width: int = 64
    student_width: int = 32
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    max_seq_len: int = 32
    teacher_epochs: int = 10
    student_epochs: int = 20
    teacher_opt: OptimizerParams = OptimizerParams(lr=0.3, warmup_steps=20, batch_size=32)
    student_opt: OptimizerParams = OptimizerParams(lr=0.5, warmup_steps=20, batch_size=32)

    def model_config(self, width: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.synth.vocab_size,
            d_model=width,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            head_dim=width // self.n_heads,
            d_intermediate=self.mlp_ratio * width,
            max_seq_len=self.max_seq_len,
        )

    def data(self):
        s = self.seed
        train_ds = synth_data(s, self.train_users, self.items_per_user, self.synth)
        val_ds = synth_data(s + 1000, self.val_users, self.items_per_user, self.synth)
        calib = synth_data(s + 2000, self.calib_n // self.items_per_user + 1, self.items_per_user, self.synth)
        calib = calib.subset(np.arange(self.calib_n))
        off = synth_offdomain(s + 3000, self.calib_n, self.synth)
        return train_ds, val_ds, calib, off

    def teacher_data(self) -> SynthDataset:
        """The teacher's larger pool from the same task, standing in for pretraining."""
        return synth_data(self.seed + 4000, self.teacher_users, self.items_per_user, self.synth)


@lru_cache(maxsize=8)
def _data(setup: Setup):
    return setup.data()


@lru_cache(maxsize=8)
def trained_teacher(setup: Setup, width: Optional[int] = None) -> ToyModel:
    """Wide model trained with cross-entropy only; best epoch by validation loss."""
    width = setup.teacher_width if width is None else width
    _, val_ds, _, _ = _data(setup)
    init = init_model(setup.model_config(width), setup.seed + width)
    res = train(init, None, setup.teacher_data(), val_ds, KDLossConfig.sft(), setup.teacher_epochs, setup.teacher_opt,
                stage=f"teacher{width}")
    return res.best


def student_init(setup: Setup) -> ToyModel:
    return init_model(setup.model_config(setup.student_width), setup.seed)


def _summary(res: TrainResult) -> Dict[str, float]:
    last, best = res.history[-1], res.best_record
    return {"val_loss": last["val_loss"], "val_auc": last["val_auc"],
            "best_val_loss": best["val_loss"], "best_val_auc": best["val_auc"], "best_epoch": best["epoch"]}


def kd_vs_sft(setup: Setup = Setup()) -> Dict[str, Dict[str, float]]:
    train_ds, val_ds, _, _ = _data(setup)
    teacher = trained_teacher(setup)
    s0 = student_init(setup)
    kd = train(s0, teacher, train_ds, val_ds, KDLossConfig(), setup.student_epochs, setup.student_opt, stage="kd")
    sft = train(s0, None, train_ds, val_ds, KDLossConfig.sft(), setup.student_epochs, setup.student_opt, stage="sft")
    return {
        "teacher": evaluate(teacher, val_ds),
        "kd": _summary(kd),
        "sft": _summary(sft),
    }


@lru_cache(maxsize=8)
def distilled_student(setup: Setup) -> ToyModel:
    """Best FKL-distilled student; the starting point for compression."""
    train_ds, val_ds, _, _ = _data(setup)
    res = train(student_init(setup), trained_teacher(setup), train_ds, val_ds, KDLossConfig(),
                setup.student_epochs, setup.student_opt, stage="distill")
    return res.best


def two_stage_vs_single(setup: Setup = Setup(), stage2_epochs: int = 6, fr: float = 1.0,
                        teacher_width: Optional[int] = None) -> Dict[str, Dict[str, float]]:
    """FKL for all epochs vs FKL then on-policy FKL with the same epoch total."""
    train_ds, val_ds, _, _ = _data(setup)
    teacher = trained_teacher(setup, teacher_width)
    s0 = student_init(setup)
    E = setup.student_epochs
    single = train(s0, teacher, train_ds, val_ds, KDLossConfig(), E, setup.student_opt, stage="fkl")
    sched = SamplingSchedule(fr=fr, tk=4, temperature=1.0, seed=setup.seed)
    two = two_stage_train(s0, teacher, train_ds, val_ds, KDLossConfig(), (KDLossConfig(), sched),
                          (E - stage2_epochs, stage2_epochs), setup.student_opt)
    return {"single": {"val_loss": single.best_val_loss}, "two_stage": {"val_loss": two.best_val_loss}}


def teacher_size(setup: Setup = Setup(), stage2_epochs: int = 6) -> Dict[str, float]:
    """Two-stage students distilled from 4x- and 2x-wide teachers."""
    out = {}
    for mult in (2, 4):
        r = two_stage_vs_single(setup, stage2_epochs, teacher_width=mult * setup.student_width)
        out[f"{mult}x"] = r["two_stage"]["val_loss"]
    return out


def _retrain(model, teacher, setup, epochs, kd: bool, stage: str) -> TrainResult:
    train_ds, val_ds, _, _ = _data(setup)
    cfg = KDLossConfig() if kd else KDLossConfig.sft()
    return train(model, teacher if kd else None, train_ds, val_ds, cfg, epochs, setup.student_opt, stage=stage)


def prune_recovery(setup: Setup = Setup(), frac: float = 0.375, epochs: int = 6) -> Dict[str, float]:
    """Prune a fraction of MLP neurons, then retrain with KD or SFT.

    Recovery is the fraction of the AUC lost to pruning that retraining wins back.
    """
    _, val_ds, calib, _ = _data(setup)
    base = distilled_student(setup)
    teacher = trained_teacher(setup)
    n = int(round(frac * base.d_intermediate(0)))
    pruned = prune_model_mlp(base, n, calib)
    auc_base = evaluate(base, val_ds)["auc"]
    auc_pruned = evaluate(pruned, val_ds)["auc"]
    gap = auc_base - auc_pruned
    out = {"auc_base": auc_base, "auc_pruned": auc_pruned, "n_removed_per_layer": n}
    for kd in (True, False):
        name = "kd" if kd else "sft"
        res = _retrain(pruned, teacher, setup, epochs, kd, f"re-{name}")
        a = res.best_record["val_auc"]
        out[f"auc_{name}"] = a
        out[f"recovery_{name}"] = (a - auc_pruned) / gap if gap > 0 else float("nan")
    return out


def gradual_vs_oneshot(setup: Setup = Setup(), frac: float = 0.375, epochs: int = 6) -> Dict[str, float]:
    """Two pruning steps with distillation in between vs one step; same total epochs."""
    _, val_ds, calib, _ = _data(setup)
    base = distilled_student(setup)
    teacher = trained_teacher(setup)
    total = int(round(frac * base.d_intermediate(0)))
    one = _retrain(prune_model_mlp(base, total, calib), teacher, setup, epochs, True, "oneshot")
    model = base
    steps = gradual_schedule(total, 2)
    per_step = [epochs // 2, epochs - epochs // 2]
    for k, (n, e) in enumerate(zip(steps, per_step)):
        model = prune_model_mlp(model, n, calib)
        res = _retrain(model, teacher, setup, e, True, f"gradual{k}")
        model = res.best
    return {"oneshot": one.best_val_loss, "gradual": evaluate(model, val_ds)["loss"], "steps": steps}


def calibration_domain(setup: Setup = Setup(), frac: float = 0.375, n_in: int = 128) -> Dict[str, float]:
    """One-shot pruning calibrated on a few in-domain vs many off-domain sequences."""
    _, val_ds, calib, off = _data(setup)
    base = distilled_student(setup)
    n = int(round(frac * base.d_intermediate(0)))
    out = {"base": evaluate(base, val_ds)["loss"]}
    out["in_domain"] = evaluate(prune_model_mlp(base, n, calib.subset(np.arange(n_in))), val_ds)["loss"]
    out["off_domain"] = evaluate(prune_model_mlp(base, n, off), val_ds)["loss"]
    return out


def quant_ordering(setup: Setup = Setup()) -> Dict[str, float]:
    """Validation-loss increase of each quantization scheme on the distilled student."""
    _, val_ds, calib, _ = _data(setup)
    base = distilled_student(setup)
    out = {}
    for scheme in Scheme:
        _, rep = quantize_model(base, scheme, calib, val_data=val_ds)
        out[scheme.value] = rep.val_loss_delta
    return out


def bench_model(seed: int = SEED, context: int = 1024) -> ToyModel:
    cfg = ModelConfig(vocab_size=64, d_model=64, n_layers=2, n_heads=8, head_dim=8, d_intermediate=256,
                      max_seq_len=context + 16)
    return init_model(cfg, seed)


def bench_directions(seed: int = SEED, context: int = 1024, k: int = 4, repeats: int = 3) -> Dict[str, float]:
    """Hot vs cold prefill, and attention time before and after halving the heads."""
    from .slmctl.bench import bench

    model = bench_model(seed, context)
    cold = bench(model, context, k, hot=False, repeats=repeats, seed=seed)
    hot = bench(model, context, k, hot=True, repeats=repeats, seed=seed)
    calib = synth_data(seed, 40, 5)
    half = prune_model_heads(model, model.config.n_heads // 2, calib)
    pruned = bench(half, context, 1, repeats=repeats, seed=seed)
    full_attn = cold.split_ms["attention"]
    return {
        "cold_ttft_ms": cold.mean_ttft(False),
        "hot_ttft_ms": hot.mean_ttft(True),
        "n_hot": hot.n_hot,
        "attention_ms": full_attn,
        "attention_half_heads_ms": pruned.split_ms["attention"],
        "attention_reduction": 1.0 - pruned.split_ms["attention"] / full_attn,
    }
