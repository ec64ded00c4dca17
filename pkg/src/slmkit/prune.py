"""Structured pruning by discrete optimization of the layerwise objective.

A linear layer ``y = x @ W`` (``W`` is d x p) loses whole groups of input
dims: single MLP neurons (rows of ``mlp_down``) or whole heads (head_dim-row
blocks of ``attn_o``).  The solver runs in two phases:

1. greedy backward elimination with group-OBS scores and the matching
   closed-form compensation of the surviving rows;
2. best-improvement exchange local search using the exact least-squares
   refit objective: single swaps, then pair swaps once singles stall (when
   the neighbourhood is small enough).

The returned weights are always the exact refit on the final support.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .calibrate import collect_calibrations
from .matcal import (
    DEFAULT_LAMBDA_REL,
    DampedFactor,
    LayerCalibration,
    NumericError,
    as_dense,
    cholesky_lower,
    damp_and_factor,
    embed_rows,
    reconstruction_error,
    refit_support,
)
from .toylm.model import ToyModel, layer_key

log = logging.getLogger(__name__)

BRUTE_FORCE_BUDGET = 200_000


class GroupKind(str, enum.Enum):
    MLP_NEURON = "mlp_neuron"
    ATTN_HEAD = "attn_head"


@dataclass(frozen=True)
class GroupPartition:
    dim: int
    groups: Tuple[Tuple[int, ...], ...]
    kind: GroupKind = GroupKind.MLP_NEURON

    def __post_init__(self):
        flat = sorted(i for g in self.groups for i in g)
        if flat != list(range(self.dim)):
            raise ValueError("groups must be disjoint and cover 0..dim-1 exactly")
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty group")
        if self.kind == GroupKind.ATTN_HEAD and len({len(g) for g in self.groups}) != 1:
            raise ValueError("attention-head groups must all have size head_dim")

    @classmethod
    def neurons(cls, d: int) -> "GroupPartition":
        return cls(d, tuple((i,) for i in range(d)), GroupKind.MLP_NEURON)

    @classmethod
    def heads(cls, n_heads: int, head_dim: int) -> "GroupPartition":
        groups = tuple(tuple(range(h * head_dim, (h + 1) * head_dim)) for h in range(n_heads))
        return cls(n_heads * head_dim, groups, GroupKind.ATTN_HEAD)

    def __len__(self) -> int:
        return len(self.groups)

    def rows(self, group_ids: Sequence[int]) -> List[int]:
        return sorted(i for g in group_ids for i in self.groups[g])


@dataclass
class PruneConfig:
    k_remove: int = 0
    n_steps: int = 1
    swap_iters_max: int = 20
    lambda_rel: float = DEFAULT_LAMBDA_REL
    exact_refit_every_step: bool = False
    # pair exchanges are tried only when single swaps stall and the move count fits
    pair_swap_budget: int = 2000

    def validate(self, kind: GroupKind = GroupKind.MLP_NEURON) -> None:
        if self.k_remove < 0:
            raise ValueError("k_remove must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if kind == GroupKind.MLP_NEURON and self.k_remove > 0 and self.n_steps > self.k_remove:
            raise ValueError(f"n_steps {self.n_steps} exceeds k_remove {self.k_remove}")
        if self.swap_iters_max < 0:
            raise ValueError("swap_iters_max must be >= 0")
        if self.lambda_rel <= 0:
            raise ValueError("lambda_rel must be > 0")


@dataclass
class TraceStep:
    phase: str  # "greedy" or "swap"
    removed: int
    score: float
    objective: float
    added: Optional[int] = None


@dataclass
class PruneResult:
    kept: Tuple[int, ...]
    W_hat: np.ndarray  # rows of the kept groups, in ascending row order
    objective: float
    trace: List[TraceStep] = field(default_factory=list)
    greedy_kept: Tuple[int, ...] = ()
    greedy_objective: float = float("nan")

    def verify(self, calib: LayerCalibration, W: np.ndarray, partition: GroupPartition) -> None:
        full = embed_rows(self.W_hat, partition.rows(self.kept), partition.dim)
        err = reconstruction_error(calib, W, full)
        if not math.isclose(err, self.objective, rel_tol=1e-8, abs_tol=1e-12):
            raise AssertionError(f"reported objective {self.objective} != recomputed {err}")


def obs_group_score(factor: DampedFactor, W, group: Sequence[int]) -> float:
    """Objective increase from zeroing ``group`` rows with optimal compensation.

    ``factor.inverse`` is the inverse of the damped Gram on the live support
    (rows of dead dims are zero).  Score = tr(W_g^T [(H^-1)_gg]^-1 W_g).
    """
    W = np.asarray(W, dtype=np.float64)
    g = np.asarray(group, dtype=int)
    Wg = W[g]
    if not np.any(Wg):
        return 0.0
    block = factor.inverse[np.ix_(g, g)]
    try:
        L = cholesky_lower(block)
    except NumericError as e:
        raise NumericError(f"singular inverse block for group {list(g)}: {e}") from None
    z = np.linalg.solve(L, Wg)
    return float(np.sum(z * z))


def _support_inverse(A: np.ndarray, rows: Sequence[int]) -> np.ndarray:
    d = A.shape[0]
    rows = np.asarray(rows, dtype=int)
    inv = np.zeros((d, d))
    sub = A[np.ix_(rows, rows)]
    L = cholesky_lower(sub)
    Linv = np.linalg.solve(L, np.eye(len(rows)))
    inv[np.ix_(rows, rows)] = Linv.T @ Linv
    return inv


def _exact_objective(calib, W, partition, kept, lambda_rel) -> Tuple[float, np.ndarray]:
    rows = partition.rows(kept)
    W_S = refit_support(calib, W, rows, lambda_rel, anchored=True)
    err = reconstruction_error(calib, W, embed_rows(W_S, rows, partition.dim))
    return err, W_S


def _greedy(calib, W, partition, k_remove, cfg) -> Tuple[List[int], List[TraceStep]]:
    factor = damp_and_factor(calib, cfg.lambda_rel)
    A = factor.damped
    Ainv = factor.inverse.copy()
    Wc = W.copy()
    live = list(range(len(partition)))
    trace: List[TraceStep] = []
    obj = 0.0  # damped-metric objective, starts at the unconstrained optimum W
    for _ in range(k_remove):
        fac = DampedFactor(factor.dim, factor.lower_factor, factor.lam, Ainv, A)
        scores = [obs_group_score(fac, Wc, partition.groups[g]) for g in live]
        j = int(np.argmin(scores))  # first minimum -> lowest group index
        g = live.pop(j)
        idx = np.asarray(partition.groups[g], dtype=int)
        obj += scores[j]
        rows = partition.rows(live)
        try:
            if cfg.exact_refit_every_step:
                raise NumericError("exact refit requested")
            blk_inv = np.linalg.inv(Ainv[np.ix_(idx, idx)])
            Wc = Wc - Ainv[:, idx] @ blk_inv @ Wc[idx]
            Ainv = Ainv - Ainv[:, idx] @ blk_inv @ Ainv[idx, :]
            Ainv = 0.5 * (Ainv + Ainv.T)
            Wc[idx] = 0.0
            Ainv[idx, :] = 0.0
            Ainv[:, idx] = 0.0
            if not np.all(np.isfinite(Wc)) or np.any(np.diag(Ainv)[rows] <= 0):
                raise NumericError("inverse update lost positivity")
        except (NumericError, np.linalg.LinAlgError) as e:
            if not cfg.exact_refit_every_step:
                log.debug("falling back to re-factorization: %s", e)
            Ainv = _support_inverse(A, rows)
            Wc = np.zeros_like(W)
            Wc[rows] = Ainv[np.ix_(rows, rows)] @ (A[rows, :] @ W)
        trace.append(TraceStep("greedy", g, float(scores[j]), obj))
    return live, trace


def prune_groups(calib: LayerCalibration, W, partition: GroupPartition, cfg: PruneConfig) -> PruneResult:
    """Remove ``cfg.k_remove`` groups of input dims from ``W`` (d x p)."""
    W = as_dense(W, "W")
    cfg.validate(partition.kind)
    calib.check_ready()
    if W.shape[0] != partition.dim or calib.dim != partition.dim:
        raise ValueError(
            f"shape mismatch: W has {W.shape[0]} rows, partition dim {partition.dim}, calibration dim {calib.dim}"
        )
    n = len(partition)
    if cfg.k_remove >= n:
        raise ValueError(f"k_remove {cfg.k_remove} must be < number of groups {n}")

    kept, trace = _greedy(calib, W, partition, cfg.k_remove, cfg)
    obj, W_S = _exact_objective(calib, W, partition, kept, cfg.lambda_rel)
    greedy_kept, greedy_obj = tuple(kept), obj
    trace.append(TraceStep("greedy-refit", -1, 0.0, obj))

    removed = sorted(set(range(n)) - set(kept))
    for _ in range(cfg.swap_iters_max):
        if not removed:
            break
        best = _best_exchange(calib, W, partition, kept, removed, obj, 1, cfg.lambda_rel)
        if best is None and math.comb(len(kept), 2) * math.comb(len(removed), 2) <= cfg.pair_swap_budget:
            best = _best_exchange(calib, W, partition, kept, removed, obj, 2, cfg.lambda_rel)
        if best is None:
            break
        obj, W_S, kept, out_g, in_g = best
        removed = sorted((set(removed) - set(in_g)) | set(out_g))
        for k, r in zip(out_g, in_g):
            trace.append(TraceStep("swap", k, 0.0, obj, added=r))

    res = PruneResult(tuple(sorted(kept)), W_S, obj, trace, greedy_kept, greedy_obj)
    res.verify(calib, W, partition)
    return res


def _best_exchange(calib, W, partition, kept, removed, obj, size, lambda_rel):
    """Best strictly improving exchange of ``size`` kept groups for ``size`` removed ones."""
    best = None
    tol = 1e-12 * max(1.0, abs(obj))
    kept_set = set(kept)
    for ins in itertools.combinations(removed, size):
        for outs in itertools.combinations(kept, size):
            cand = sorted((kept_set - set(outs)) | set(ins))
            err, ws = _exact_objective(calib, W, partition, cand, lambda_rel)
            if err < obj - tol and (best is None or err < best[0]):
                best = (err, ws, cand, outs, ins)
    return best


def brute_force_prune(calib: LayerCalibration, W, partition: GroupPartition, k_remove: int,
                      lambda_rel: float = DEFAULT_LAMBDA_REL) -> PruneResult:
    """Exhaustive search over all supports; ties -> lexicographically smallest kept set."""
    W = as_dense(W, "W")
    n = len(partition)
    if not 0 <= k_remove < n:
        raise ValueError(f"k_remove must be in [0, {n - 1}]")
    n_sets = math.comb(n, k_remove)
    if n_sets > BRUTE_FORCE_BUDGET:
        raise ValueError(f"combinatorial budget exceeded: C({n}, {k_remove}) = {n_sets} > {BRUTE_FORCE_BUDGET}")
    best = None
    for kept in itertools.combinations(range(n), n - k_remove):
        err, ws = _exact_objective(calib, W, partition, kept, lambda_rel)
        if best is None or err < best[0]:
            best = (err, ws, kept)
    err, ws, kept = best
    return PruneResult(tuple(kept), ws, err)


def gradual_schedule(total_remove: int, n_steps: int) -> List[int]:
    """Split ``total_remove`` into ``n_steps`` near-equal counts, remainder first."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > total_remove:
        raise ValueError(f"n_steps {n_steps} > total_remove {total_remove}")
    base, rem = divmod(total_remove, n_steps)
    return [base + (1 if i < rem else 0) for i in range(n_steps)]


def prune_mlp(model: ToyModel, layer: int, n_neurons_remove: int, calib_data, cfg: Optional[PruneConfig] = None,
              calib: Optional[LayerCalibration] = None, return_result: bool = False):
    """Drop ``n_neurons_remove`` intermediate neurons of one layer.

    ``mlp_down`` rows of survivors are refit; ``mlp_gate``/``mlp_up`` columns of
    removed neurons are deleted without refit.
    """
    cfg = PruneConfig() if cfg is None else cfg
    inter = model.d_intermediate(layer)
    if not 0 <= n_neurons_remove < inter:
        raise ValueError(f"n_neurons_remove must be in [0, {inter - 1}]")
    if calib is None:
        calib = collect_calibrations(model, calib_data, [(layer, "mlp_down")])[(layer, "mlp_down")]
    W = model.layer(layer, "mlp_down")
    part = GroupPartition.neurons(inter)
    res = prune_groups(calib, W, part, replace(cfg, k_remove=n_neurons_remove, n_steps=1))
    keep = np.asarray(part.rows(res.kept), dtype=int)
    out = model.copy()
    out.tensors[layer_key(layer, "mlp_down")] = res.W_hat
    out.tensors[layer_key(layer, "mlp_gate")] = model.layer(layer, "mlp_gate")[:, keep].copy()
    out.tensors[layer_key(layer, "mlp_up")] = model.layer(layer, "mlp_up")[:, keep].copy()
    out.validate()
    return (out, res) if return_result else out


def prune_heads(model: ToyModel, layer: int, n_heads_remove: int, calib_data, cfg: Optional[PruneConfig] = None,
                calib: Optional[LayerCalibration] = None, return_result: bool = False):
    """Drop whole attention heads of one layer, refitting ``attn_o`` only."""
    cfg = PruneConfig() if cfg is None else cfg
    h = model.n_heads(layer)
    if not 0 <= n_heads_remove < h:
        raise ValueError(f"n_heads_remove must be in [0, {h - 1}]")
    hd = model.config.head_dim
    if calib is None:
        calib = collect_calibrations(model, calib_data, [(layer, "attn_o")])[(layer, "attn_o")]
    W = model.layer(layer, "attn_o")
    part = GroupPartition.heads(h, hd)
    res = prune_groups(calib, W, part, replace(cfg, k_remove=n_heads_remove, n_steps=1))
    keep = np.asarray(part.rows(res.kept), dtype=int)
    out = model.copy()
    out.tensors[layer_key(layer, "attn_o")] = res.W_hat
    for name in ("attn_q", "attn_k", "attn_v"):
        out.tensors[layer_key(layer, name)] = model.layer(layer, name)[:, keep].copy()
    out.validate()
    return (out, res) if return_result else out


def prune_model(model: ToyModel, kind: str, n_per_layer: int, calib_data,
                cfg: Optional[PruneConfig] = None) -> Tuple[ToyModel, List[float]]:
    """One-shot pruning of every layer; returns the model and per-layer objectives.

    ``kind`` is ``"mlp"`` or ``"heads"``.  All layers are calibrated once on the
    input model.
    """
    cfg = PruneConfig() if cfg is None else cfg
    site, fn = {"mlp": ("mlp_down", prune_mlp), "heads": ("attn_o", prune_heads)}[kind]
    sel = [(i, site) for i in range(model.config.n_layers)]
    calibs = collect_calibrations(model, calib_data, sel)
    out, objectives = model, []
    for i in range(model.config.n_layers):
        out, res = fn(out, i, n_per_layer, None, cfg, calib=calibs[(i, site)], return_result=True)
        objectives.append(res.objective)
    return out, objectives


def prune_model_mlp(model: ToyModel, n_per_layer: int, calib_data, cfg: Optional[PruneConfig] = None) -> ToyModel:
    return prune_model(model, "mlp", n_per_layer, calib_data, cfg)[0]


def prune_model_heads(model: ToyModel, n_per_layer: int, calib_data, cfg: Optional[PruneConfig] = None) -> ToyModel:
    return prune_model(model, "heads", n_per_layer, calib_data, cfg)[0]
