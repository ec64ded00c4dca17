"""Pipeline configuration, read from TOML and validated before anything runs.

Example::

    seed = 21
    stages = ["distill", "prune_mlp", "eval"]

    [paths]
    out = "runs/full"
    # teacher = "ckpt/teacher"   # optional; otherwise trained from [teacher]
    # model = "ckpt/student"     # optional; otherwise initialised from [model]
    # train = "data/train.jsonl" # optional; otherwise generated from [data]

    [data]
    train_users = 200

    [distill]
    recipe = "fkl"
    epochs = 20

    [prune_mlp]
    fraction = 0.375
    n_steps = 2
    redistill_epochs = 6

Every section is optional and falls back to the defaults below; unknown keys
and sections are errors.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..distill import RECIPES, KDLossConfig, OptimizerParams, SamplingSchedule, recipe_configs
from ..prune import GroupKind, PruneConfig
from ..quant import Scheme

STAGES = ("distill", "prune_mlp", "prune_heads", "quantize", "eval", "bench")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    out: str = "slmctl-out"
    model: Optional[str] = None
    teacher: Optional[str] = None
    train: Optional[str] = None
    val: Optional[str] = None
    calib: Optional[str] = None


@dataclass
class DataConfig:
    train_users: int = 200
    val_users: int = 200
    teacher_users: int = 800
    items_per_user: int = 5
    calib_n: int = 512
    calib_domain: str = "in"  # or "off"


@dataclass
class ModelSection:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    max_seq_len: int = 32


@dataclass
class TrainSection:
    lr: float = 0.5
    warmup_steps: int = 20
    min_lr_frac: float = 0.05
    clip_norm: float = 1.0
    batch_size: int = 32
    momentum: float = 0.0

    def optimizer(self, seed: int) -> OptimizerParams:
        return OptimizerParams(self.lr, self.warmup_steps, self.min_lr_frac, self.clip_norm, self.batch_size,
                               self.momentum, seed)


@dataclass
class TeacherSection(TrainSection):
    d_model: int = 64
    epochs: int = 10
    lr: float = 0.3


@dataclass
class DistillSection(TrainSection):
    recipe: str = "fkl"
    epochs: int = 20
    stage2_epochs: int = 0
    beta: float = 0.5
    prompt_weight: float = 0.05
    fr: float = 1.0
    tk: int = 4
    sample_temperature: float = 1.0

    def losses(self) -> Tuple[KDLossConfig, Optional[KDLossConfig]]:
        return recipe_configs(self.recipe, self.beta, self.prompt_weight)

    def schedule(self, seed: int) -> SamplingSchedule:
        return SamplingSchedule(self.fr, self.tk, self.sample_temperature, seed)


@dataclass
class PruneSection:
    count: Optional[int] = None  # groups removed per layer
    fraction: Optional[float] = None
    n_steps: int = 1
    redistill_epochs: int = 0
    swap_iters_max: int = 20
    lambda_rel: float = 0.01
    pair_swap_budget: int = 2000

    def solver(self) -> PruneConfig:
        return PruneConfig(swap_iters_max=self.swap_iters_max, lambda_rel=self.lambda_rel,
                           pair_swap_budget=self.pair_swap_budget)

    def total(self, n_groups: int) -> int:
        return self.count if self.count is not None else int(round(self.fraction * n_groups))


@dataclass
class QuantSection:
    scheme: str = "W4A16_GPTQ"
    lambda_rel: float = 0.01
    quantease_sweeps: int = 10
    smooth_alpha: float = 0.5
    fp8_activations: bool = False


@dataclass
class EvalSection:
    metrics: List[str] = field(default_factory=lambda: ["loss", "auc"])


@dataclass
class BenchSection:
    context: int = 24
    k: int = 4
    hot: bool = True
    repeats: int = 3
    decode_tokens: int = 4
    prefix_frac: float = 0.9


@dataclass
class PipelineConfig:
    seed: int = 21
    stages: List[str] = field(default_factory=lambda: ["eval"])
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    prune_mlp: PruneSection = field(default_factory=PruneSection)
    prune_heads: PruneSection = field(default_factory=PruneSection)
    quantize: QuantSection = field(default_factory=QuantSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Check every stage's parameters up front (fail fast)."""
        def need(cond, field_name, msg):
            if not cond:
                raise ConfigError(f"{field_name}: {msg}")

        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        need(self.threads >= 1, "threads", "must be >= 1")
        need(len(self.stages) > 0, "stages", "must list at least one stage")
        for s in self.stages:
            need(s in STAGES, "stages", f"unknown stage {s!r}; expected one of {list(STAGES)}")
        d = self.data
        for name in ("train_users", "val_users", "teacher_users", "items_per_user", "calib_n"):
            need(getattr(d, name) >= 1, f"data.{name}", "must be >= 1")
        need(d.calib_domain in ("in", "off"), "data.calib_domain", "must be 'in' or 'off'")
        m = self.model
        need(m.d_model % m.n_heads == 0, "model.d_model", "must be divisible by model.n_heads")
        need(self.teacher.d_model % m.n_heads == 0, "teacher.d_model", "must be divisible by model.n_heads")
        for sec in ("teacher", "distill"):
            t = getattr(self, sec)
            need(t.lr >= 0, f"{sec}.lr", "must be >= 0")
            need(t.batch_size >= 1, f"{sec}.batch_size", "must be >= 1")
            need(t.epochs >= 0, f"{sec}.epochs", "must be >= 0")
            need(0 <= t.momentum < 1, f"{sec}.momentum", "must be in [0, 1)")
        ds = self.distill
        need(ds.recipe in RECIPES, "distill.recipe", f"unknown recipe {ds.recipe!r}; expected one of {list(RECIPES)}")
        s1, s2 = ds.losses()
        try:
            s1.validate()
            if s2 is not None:
                s2.validate()
                ds.schedule(self.seed).validate()
        except ValueError as e:
            raise ConfigError(f"distill: {e}") from None
        need(s2 is None or ds.stage2_epochs >= 1, "distill.stage2_epochs",
             f"recipe {ds.recipe} needs stage2_epochs >= 1")
        for name, kind in (("prune_mlp", GroupKind.MLP_NEURON), ("prune_heads", GroupKind.ATTN_HEAD)):
            p = getattr(self, name)
            if name in self.stages:
                need((p.count is None) != (p.fraction is None), f"{name}.count",
                     "set exactly one of count or fraction")
            need(p.count is None or p.count >= 1, f"{name}.count", "must be >= 1")
            need(p.fraction is None or 0 < p.fraction < 1, f"{name}.fraction", "must be in (0, 1)")
            need(p.n_steps >= 1, f"{name}.n_steps", "must be >= 1")
            need(p.redistill_epochs >= 0, f"{name}.redistill_epochs", "must be >= 0")
            try:
                p.solver().validate(kind)
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        try:
            Scheme(self.quantize.scheme)
        except ValueError:
            raise ConfigError(f"quantize.scheme: unknown scheme {self.quantize.scheme!r}; "
                              f"expected one of {[s.value for s in Scheme]}") from None
        need(self.quantize.lambda_rel > 0, "quantize.lambda_rel", "must be > 0")
        for metric in self.eval.metrics:
            need(metric in ("loss", "auc"), "eval.metrics", f"unknown metric {metric!r}")
        b = self.bench
        need(b.context >= 2, "bench.context", "must be >= 2")
        need(b.k >= 1 and b.repeats >= 1, "bench.k", "k and repeats must be >= 1")
        need(0 < b.prefix_frac < 1, "bench.prefix_frac", "must be in (0, 1)")


_SECTIONS = {f.name: f for f in fields(PipelineConfig)}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return cls(**raw)


def config_from_dict(raw: dict) -> PipelineConfig:
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key(s) or section(s) {unknown}")
    kw = {}
    for name, value in raw.items():
        default = PipelineConfig()
        sub = getattr(default, name)
        if hasattr(sub, "__dataclass_fields__"):
            kw[name] = _build(type(sub), value, name)
        else:
            kw[name] = value
    try:
        cfg = PipelineConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(raw)
