"""Post-training weight quantization: grids, RTN, GPTQ, QuantEase, SmoothQuant.

Weights are ``(d_in, p)`` matrices; "output channels" are columns.  The
quantized model is simulated: each projection is replaced by its
dequantized float64 values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .calibrate import activation_absmax, collect_calibrations
from .fp8 import fp8_fake_quant
from .matcal import (
    DEFAULT_LAMBDA_REL,
    LayerCalibration,
    NumericError,
    as_dense,
    cholesky_lower,
    damp_and_factor,
    reconstruction_error,
)
from .toylm.model import ToyModel, layer_key


class Scheme(str, enum.Enum):
    W4A16_RTN = "W4A16_RTN"
    W4A16_GPTQ = "W4A16_GPTQ"
    W4A16_QUANTEASE = "W4A16_QUANTEASE"
    W8A8_SMOOTH = "W8A8_SMOOTH"
    FP8 = "FP8"

    @property
    def needs_calibration(self) -> bool:
        return self in (Scheme.W4A16_GPTQ, Scheme.W4A16_QUANTEASE, Scheme.W8A8_SMOOTH)


@dataclass
class QuantGrid:
    bits: int
    symmetric: bool
    per_channel: bool
    scales: np.ndarray
    zero_points: np.ndarray
    q_min: int
    q_max: int

    def broadcast(self, p: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.per_channel:
            if len(self.scales) != p:
                raise ValueError(f"grid has {len(self.scales)} channels, matrix has {p}")
            return self.scales, self.zero_points
        return np.full(p, self.scales[0]), np.full(p, self.zero_points[0])


@dataclass
class QuantizedMatrix:
    codes: np.ndarray  # int64 (d, p)
    grid: QuantGrid

    def dequantize(self) -> np.ndarray:
        s, z = self.grid.broadcast(self.codes.shape[1])
        return (self.codes - z[None, :]) * s[None, :]

    def check(self) -> None:
        if self.codes.min() < self.grid.q_min or self.codes.max() > self.grid.q_max:
            raise AssertionError("codes outside [q_min, q_max]")


def round_half_away(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def fit_grid(W, bits: int = 4, scheme: str = "symmetric", granularity: str = "per-channel") -> QuantGrid:
    """Scales (and zero points) from the range of ``W``; all-zero channels get scale 1."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    if scheme not in ("symmetric", "asymmetric"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if granularity not in ("per-channel", "per-tensor"):
        raise ValueError(f"unknown granularity {granularity!r}")
    W = as_dense(W, "W")
    per_channel = granularity == "per-channel"
    cols = W if per_channel else W.reshape(-1, 1)
    if scheme == "symmetric":
        q_min, q_max = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        amax = np.max(np.abs(cols), axis=0)
        scales = np.where(amax > 0, amax / q_max, 1.0)
        zps = np.zeros(len(scales), dtype=np.int64)
    else:
        q_min, q_max = 0, 2**bits - 1
        lo = np.minimum(np.min(cols, axis=0), 0.0)
        hi = np.maximum(np.max(cols, axis=0), 0.0)
        rng = hi - lo
        scales = np.where(rng > 0, rng / (q_max - q_min), 1.0)
        zps = np.clip(round_half_away(-lo / scales), q_min, q_max).astype(np.int64)
    return QuantGrid(bits, scheme == "symmetric", per_channel, scales.astype(np.float64), zps, q_min, q_max)


def _codes(values: np.ndarray, s: np.ndarray, z: np.ndarray, grid: QuantGrid) -> np.ndarray:
    return np.clip(round_half_away(values / s + z), grid.q_min, grid.q_max).astype(np.int64)


def rtn_quantize(W, grid: QuantGrid) -> QuantizedMatrix:
    W = as_dense(W, "W")
    s, z = grid.broadcast(W.shape[1])
    return QuantizedMatrix(_codes(W, s, z, grid), grid)


def gptq_quantize(W, calib: LayerCalibration, grid: QuantGrid,
                  lambda_rel: float = DEFAULT_LAMBDA_REL) -> QuantizedMatrix:
    """Sequential row quantization with OBS error feedback, rows in index order.

    After row j is rounded, its error is pushed onto the rows not yet
    quantized using the damped inverse Hessian restricted to those rows,
    ``Hinv_{j+1:, j} / Hinv_jj``.  Both come from the upper Cholesky factor
    ``U`` of ``(H + lambda I)^-1``: the ratio is ``U[j, j+1:] / U[j, j]``.
    """
    W = as_dense(W, "W").copy()
    d, p = W.shape
    if calib.dim != d:
        raise ValueError(f"calibration dim {calib.dim} does not match W rows {d}")
    factor = damp_and_factor(calib, lambda_rel)
    U = cholesky_lower(factor.inverse).T
    s, z = grid.broadcast(p)
    codes = np.empty((d, p), dtype=np.int64)
    for j in range(d):
        if U[j, j] <= 0:
            raise NumericError(f"non-positive inverse Hessian diagonal at row {j}")
        codes[j] = _codes(W[j], s, z, grid)
        err = (W[j] - (codes[j] - z) * s) / U[j, j]
        W[j + 1 :] -= np.outer(U[j, j + 1 :], err)
    return QuantizedMatrix(codes, grid)


@dataclass
class SweepTrace:
    # per-column objective after every coordinate step: (n_steps + 1, p)
    objectives: List[np.ndarray] = field(default_factory=list)


def column_objectives(H: np.ndarray, W: np.ndarray, What: np.ndarray) -> np.ndarray:
    D = W - What
    return np.sum(D * (H @ D), axis=0)


def quantease_sweep(W, What0: QuantizedMatrix, calib: LayerCalibration, grid: QuantGrid,
                    n_sweeps: int = 10, trace: Optional[SweepTrace] = None) -> QuantizedMatrix:
    """Cyclic coordinate descent over the quantization grid.

    Column objectives are independent, so all columns move together while the
    sweep walks the input dims.  For coordinate (j, k) the unconstrained
    minimizer is ``w* = What_jk + (B_jk - (H What)_jk) / H_jj`` with
    ``B = H W``; the new value is the grid point nearest to ``w*``, kept only
    if it lowers the objective, so every step is non-increasing.  Dims with
    ``H_jj = 0`` do not affect the objective and are left alone.
    """
    W = as_dense(W, "W")
    d, p = W.shape
    if What0.codes.shape != (d, p):
        raise ValueError(f"initial codes {What0.codes.shape} do not match W {W.shape}")
    if calib.dim != d:
        raise ValueError(f"calibration dim {calib.dim} does not match W rows {d}")
    H = calib.gram
    s, z = grid.broadcast(p)
    codes = What0.codes.copy()
    What = (codes - z) * s
    B = calib.cross if calib.cross is not None and calib.cross.shape == (d, p) else H @ W
    R = H @ What
    diag = np.diag(H)
    if trace is not None:
        trace.objectives.append(column_objectives(H, W, What))
    for _ in range(n_sweeps):
        changed = False
        for j in range(d):
            hjj = diag[j]
            if hjj <= 0:
                continue
            target = What[j] + (B[j] - R[j]) / hjj
            new = _codes(target, s, z, grid)
            new_val = (new - z) * s
            gain = hjj * ((What[j] - target) ** 2 - (new_val - target) ** 2)
            col_obj = np.abs(np.sum((W - What) * (B - R), axis=0))
            # skip gains lost in rounding noise so the recomputed objective never ticks up
            move = (new != codes[j]) & (gain > 1e-12 * (1.0 + col_obj))
            if np.any(move):
                delta = np.where(move, new_val - What[j], 0.0)
                codes[j] = np.where(move, new, codes[j])
                What[j] = np.where(move, new_val, What[j])
                R += np.outer(H[:, j], delta)
                changed = True
            if trace is not None:
                trace.objectives.append(column_objectives(H, W, What))
        if not changed:
            break
    return QuantizedMatrix(codes, grid)


def smoothquant_scales(act_absmax, W, alpha: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Per-input-channel migration scales and the rescaled weights.

    ``s_j = a_j^alpha / max|W_j,:|^(1 - alpha)``; ``X W = (X / s) (s W)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    W = as_dense(W, "W")
    a = np.maximum(np.asarray(act_absmax, dtype=np.float64), 1e-8)
    if a.shape != (W.shape[0],):
        raise ValueError(f"act_absmax has shape {a.shape}, expected ({W.shape[0]},)")
    wmax = np.maximum(np.max(np.abs(W), axis=1), 1e-8)
    s = np.maximum(a**alpha / wmax ** (1.0 - alpha), 1e-8)
    return s, W * s[:, None]


# projection sites: each site is one input matrix X shared by these weights
SITES = {
    "attn_qkv": ("attn_q", "attn_k", "attn_v"),
    "attn_o": ("attn_o",),
    "mlp_gate_up": ("mlp_gate", "mlp_up"),
    "mlp_down": ("mlp_down",),
}


@dataclass
class QuantReport:
    scheme: str
    layer_errors: Dict[str, float]
    total_error: float
    val_loss_delta: Optional[float] = None
    notes: List[str] = field(default_factory=list)


def quantize_model(
    model: ToyModel,
    scheme,
    calib_data=None,
    *,
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    quantease_sweeps: int = 10,
    smooth_alpha: float = 0.5,
    fp8_activations: bool = False,
    sequential: bool = False,
    val_data=None,
) -> Tuple[ToyModel, QuantReport]:
    """Fake-quantize every attention/MLP projection of ``model``.

    Embeddings, norms and the unembedding stay in float.  Calibration Grams
    are collected once from the input model, or with ``sequential`` re-collected
    before each site from the partially quantized model, so later layers
    compensate for the error already introduced upstream.  ``val_data`` (a dataset) adds
    the end-to-end validation-loss delta to the report.
    """
    scheme = Scheme(scheme)
    if scheme.needs_calibration and calib_data is None:
        raise ValueError(f"scheme {scheme.value} requires calibration data")
    n_layers = model.config.n_layers
    sites = [(i, site) for i in range(n_layers) for site in SITES]
    calibs = collect_calibrations(model, calib_data, sites) if calib_data is not None else {}
    absmax = activation_absmax(model, calib_data, sites) if scheme == Scheme.W8A8_SMOOTH else {}
    out = model.copy()
    if scheme == Scheme.W8A8_SMOOTH:
        out.act_quant = {}
    elif scheme == Scheme.FP8 and fp8_activations:
        out.act_quant = {}
    errors: Dict[str, float] = {}
    notes: List[str] = []
    if scheme == Scheme.W8A8_SMOOTH:
        notes.append("activations: dynamic per-tensor absmax int8")
    for i, site in sites:
        names = SITES[site]
        Wcat = np.concatenate([model.layer(i, n) for n in names], axis=1)
        widths = [model.layer(i, n).shape[1] for n in names]
        if sequential and calib_data is not None:
            calibs[(i, site)] = collect_calibrations(out, calib_data, [(i, site)])[(i, site)]
        calib = calibs.get((i, site))
        if scheme == Scheme.W4A16_RTN:
            Wq = rtn_quantize(Wcat, fit_grid(Wcat, 4)).dequantize()
        elif scheme in (Scheme.W4A16_GPTQ, Scheme.W4A16_QUANTEASE):
            grid = fit_grid(Wcat, 4)
            qm = gptq_quantize(Wcat, calib, grid, lambda_rel)
            if scheme == Scheme.W4A16_QUANTEASE:
                qm = quantease_sweep(Wcat, qm, calib, grid, quantease_sweeps)
            Wq = qm.dequantize()
        elif scheme == Scheme.W8A8_SMOOTH:
            s, Ws = smoothquant_scales(absmax[(i, site)], Wcat, smooth_alpha)
            Wq_s = rtn_quantize(Ws, fit_grid(Ws, 8)).dequantize()
            out.act_quant[(i, site)] = {"smooth": s, "bits": 8, "format": "int"}
            # stored weights stay in the smoothed basis; error is reported in the original one
            Wq = Wq_s / s[:, None]
        else:
            Wq = np.concatenate([fp8_fake_quant(model.layer(i, n)) for n in names], axis=1)
            if fp8_activations:
                out.act_quant[(i, site)] = {"smooth": np.ones(Wcat.shape[0]), "bits": 8, "format": "fp8"}
        if calib is not None:
            errors[f"layers.{i}.{site}"] = reconstruction_error(calib, Wcat, Wq)
        stored = Wq_s if scheme == Scheme.W8A8_SMOOTH else Wq
        off = 0
        for n, w in zip(names, widths):
            out.tensors[layer_key(i, n)] = stored[:, off : off + w].copy()
            off += w
    report = QuantReport(scheme.value, errors, float(sum(errors.values())), notes=notes)
    if val_data is not None:
        from .evaluate import evaluate

        base = evaluate(model, val_data, metrics=("loss",))["loss"]
        new = evaluate(out, val_data, metrics=("loss",))["loss"]
        report.val_loss_delta = new - base
    return out, report
