"""The end-to-end pipeline: distill, prune, quantize, evaluate, benchmark.

Stages run in the configured order on one model.  After each stage the model
is rounded to checkpoint precision, saved under ``<out>/ckpt/NN-<stage>``, and
a record ``{stage, params, metrics, wall_time}`` is appended to
``<out>/report.jsonl``, whose first line is a schema header.  Everything in
the report is a deterministic function of (config, seed): ``wall_time`` is
written as null there and the measured times go to ``timings.jsonl``, and
benchmark latencies go to ``bench.jsonl``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from ..distill import KDLossConfig, train, two_stage_train
from ..evaluate import evaluate
from ..prune import gradual_schedule, prune_model
from ..quant import Scheme, quantize_model
from ..toylm.data import SynthConfig, SynthDataset, synth_data, synth_offdomain
from ..toylm.model import ModelConfig, ToyModel, count_params, init_model
from .bench import bench
from .checkpoint import load_checkpoint, round_to_storage, save_checkpoint
from .config import PipelineConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class PipelineData:
    train: SynthDataset
    val: SynthDataset
    calib: SynthDataset
    teacher_train: Optional[SynthDataset] = None


@dataclass
class PipelineResult:
    model: ToyModel
    records: List[dict] = field(default_factory=list)
    out: Optional[Path] = None


def _dump(rec) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=True)


def build_data(cfg: PipelineConfig) -> PipelineData:
    """Datasets from ``paths`` where given, otherwise generated from the seed."""
    d, s, p = cfg.data, cfg.seed, cfg.paths
    synth = SynthConfig()
    train_ds = SynthDataset.load(p.train) if p.train else synth_data(s, d.train_users, d.items_per_user, synth)
    val_ds = SynthDataset.load(p.val) if p.val else synth_data(s + 1000, d.val_users, d.items_per_user, synth)
    if p.calib:
        calib = SynthDataset.load(p.calib)
    elif d.calib_domain == "off":
        calib = synth_offdomain(s + 3000, d.calib_n, synth)
    else:
        calib = synth_data(s + 2000, d.calib_n // d.items_per_user + 1, d.items_per_user, synth)
        calib = calib.subset(np.arange(d.calib_n))
    return PipelineData(train_ds, val_ds, calib)


def _model_config(cfg: PipelineConfig, width: int, vocab: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=vocab, d_model=width, n_layers=m.n_layers, n_heads=m.n_heads,
                       head_dim=width // m.n_heads, d_intermediate=m.mlp_ratio * width, max_seq_len=m.max_seq_len)


class _Teacher:
    """Loaded or trained on first use."""

    def __init__(self, cfg: PipelineConfig, data: PipelineData):
        self.cfg, self.data, self._model = cfg, data, None

    def get(self) -> ToyModel:
        if self._model is None:
            cfg = self.cfg
            if cfg.paths.teacher:
                self._model = load_checkpoint(cfg.paths.teacher)
            else:
                t = cfg.teacher
                pool = synth_data(cfg.seed + 4000, cfg.data.teacher_users, cfg.data.items_per_user)
                init = init_model(_model_config(cfg, t.d_model, SynthConfig().vocab_size), cfg.seed + t.d_model)
                res = train(init, None, pool, self.data.val, KDLossConfig.sft(), t.epochs, t.optimizer(cfg.seed),
                            stage="teacher")
                self._model = round_to_storage(res.best)
        return self._model


def _quality(model: ToyModel, val: SynthDataset, metrics=("loss", "auc")) -> Dict[str, float]:
    m = evaluate(model, val, metrics=metrics)
    out = {f"val_{k}": float(v) for k, v in m.items()}
    out["params"] = count_params(model)
    return out


def _distill(model, cfg, data, teacher, epochs=None, stage="distill"):
    ds = cfg.distill
    s1, s2 = ds.losses()
    opt = ds.optimizer(cfg.seed)
    t = teacher.get() if s1.kd_weight > 0 or s2 is not None else None
    if epochs is None and s2 is not None:
        res = two_stage_train(model, t, data.train, data.val, s1, (s2, ds.schedule(cfg.seed)),
                              (ds.epochs, ds.stage2_epochs), opt)
    else:
        res = train(model, t, data.train, data.val, s1, ds.epochs if epochs is None else epochs, opt, stage=stage)
    return res


def _stage_distill(model, cfg, data, teacher):
    res = _distill(model, cfg, data, teacher)
    rec = res.best_record
    params = asdict(cfg.distill)
    return res.best, params, {"best_epoch": rec["epoch"], "best_stage": rec["stage"],
                              "train_loss_last": float(res.history[-1]["train_loss"])}


def _stage_prune(kind: str):
    def run(model, cfg, data, teacher):
        sec = cfg.prune_mlp if kind == "mlp" else cfg.prune_heads
        n_groups = model.d_intermediate(0) if kind == "mlp" else model.n_heads(0)
        total = sec.total(n_groups)
        if not 0 < total < n_groups:
            raise ValueError(f"prune_{kind}: cannot remove {total} of {n_groups} groups per layer")
        steps = gradual_schedule(total, sec.n_steps)
        errors = []
        for k, n in enumerate(steps):
            model, objs = prune_model(model, kind, n, data.calib, sec.solver())
            errors.append([float(o) for o in objs])
            if sec.redistill_epochs > 0:
                model = _distill(model, cfg, data, teacher, sec.redistill_epochs, stage=f"prune_{kind}{k}").best
        params = {**asdict(sec), "removed_per_layer": total, "steps": steps}
        return model, params, {"reconstruction_error": errors}
    return run


def _stage_quantize(model, cfg, data, teacher):
    q = cfg.quantize
    out, rep = quantize_model(model, Scheme(q.scheme), data.calib, lambda_rel=q.lambda_rel,
                              quantease_sweeps=q.quantease_sweeps, smooth_alpha=q.smooth_alpha,
                              fp8_activations=q.fp8_activations, val_data=data.val)
    metrics = {"reconstruction_error": {k: float(v) for k, v in sorted(rep.layer_errors.items())},
               "total_error": float(rep.total_error), "val_loss_delta": rep.val_loss_delta}
    return out, asdict(q), metrics


def _stage_eval(model, cfg, data, teacher):
    return model, asdict(cfg.eval), {}


class _BenchStage:
    def __init__(self, out: Path):
        self.path = out / "bench.jsonl"

    def __call__(self, model, cfg, data, teacher):
        b = cfg.bench
        rep = bench(model, b.context, b.k, hot=b.hot, repeats=b.repeats, prefix_frac=b.prefix_frac,
                    decode_tokens=b.decode_tokens, seed=cfg.seed)
        rep.check()
        with open(self.path, "a") as f:
            f.write(_dump(rep.to_dict()) + "\n")
        # latencies are not reproducible, so the report only carries the workload shape
        return model, asdict(b), {"prefix_len": rep.prefix_len, "n_hot": rep.n_hot, "latency_file": self.path.name}


def run_pipeline(cfg: PipelineConfig, out=None) -> PipelineResult:
    cfg.validate()
    out = Path(cfg.paths.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("report.jsonl", "timings.jsonl", "bench.jsonl"):
        (out / name).unlink(missing_ok=True)

    with threadpool_limits(limits=cfg.threads):
        data = build_data(cfg)
        vocab = SynthConfig().vocab_size
        if cfg.paths.model:
            model = load_checkpoint(cfg.paths.model)
        else:
            model = round_to_storage(init_model(_model_config(cfg, cfg.model.d_model, vocab), cfg.seed))
        teacher = _Teacher(cfg, data)
        runners = {
            "distill": _stage_distill,
            "prune_mlp": _stage_prune("mlp"),
            "prune_heads": _stage_prune("heads"),
            "quantize": _stage_quantize,
            "eval": _stage_eval,
            "bench": _BenchStage(out),
        }
        header_cfg = cfg.to_dict()
        header_cfg["paths"] = {k: v for k, v in header_cfg["paths"].items() if k != "out"}
        report = out / "report.jsonl"
        with open(report, "w") as f:
            f.write(_dump({"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "config": header_cfg}) + "\n")

        result = PipelineResult(model, out=out)
        for j, stage in enumerate(cfg.stages):
            t0 = time.monotonic()
            model, params, metrics = runners[stage](model, cfg, data, teacher)
            model = round_to_storage(model)
            metrics.update(_quality(model, data.val, cfg.eval.metrics if stage == "eval" else ("loss", "auc")))
            ckpt = out / "ckpt" / f"{j:02d}-{stage}"
            save_checkpoint(model, ckpt)
            wall = time.monotonic() - t0
            rec = {"stage": stage, "params": params, "metrics": metrics, "wall_time": None}
            with open(report, "a") as f:
                f.write(_dump(rec) + "\n")
            with open(out / "timings.jsonl", "a") as f:
                f.write(_dump({"stage": stage, "wall_time": wall}) + "\n")
            log.info("stage %s done in %.1fs: %s", stage, wall, metrics)
            result.records.append(rec)
        result.model = model
    return result


def read_report(path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
