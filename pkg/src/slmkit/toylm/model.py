"""Toy pre-norm decoder-only transformer in float64 numpy.

Block: RMS norm -> causal multi-head attention -> residual -> RMS norm ->
gated MLP (SiLU gate * up, then down) -> residual.  Learned absolute
positional embeddings.  Weights are stored as ``(in, out)`` matrices so a
layer computes ``x @ W``; that makes the calibration inputs of ``attn_o``
and ``mlp_down`` exactly the ``X`` of the layerwise objective.

The per-layer head count and intermediate width are read off the tensor
shapes, so pruned models need no extra bookkeeping.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

PAD, EOS, YES, NO = 0, 1, 2, 3

# input sites of the compressible projections: q/k/v share one input, gate/up share one
TAP_KINDS = ("attn_qkv", "attn_o", "mlp_gate_up", "mlp_down")
LAYER_TENSORS = ("norm1", "attn_q", "attn_k", "attn_v", "attn_o", "norm2", "mlp_gate", "mlp_up", "mlp_down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 8
    d_intermediate: int = 128
    max_seq_len: int = 64
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (PAD, EOS, YES, NO)")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} != d_model {self.d_model}"
            )
        for name in ("d_model", "n_layers", "n_heads", "head_dim", "d_intermediate", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def layer_key(i: int, name: str) -> str:
    return f"layers.{i}.{name}"


@dataclass
class ToyModel:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    # simulated activation quantization: {(layer, site): {"smooth": vec, "bits": 8, "format": "int"|"fp8"}}
    act_quant: Optional[Dict[Tuple[int, str], dict]] = None

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[layer_key(i, name)]

    def n_heads(self, i: int) -> int:
        return self.layer(i, "attn_q").shape[1] // self.config.head_dim

    def d_intermediate(self, i: int) -> int:
        return self.layer(i, "mlp_down").shape[0]

    def copy(self) -> "ToyModel":
        aq = None
        if self.act_quant is not None:
            aq = {k: {**v, "smooth": np.array(v["smooth"], copy=True)} for k, v in self.act_quant.items()}
        return ToyModel(self.config, {k: v.copy() for k, v in self.tensors.items()}, aq)

    def shape_table(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def validate(self) -> None:
        validate_shapes(self.config, self.shape_table())
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"tensor {k} has non-finite entries")


def expected_names(cfg: ModelConfig) -> List[str]:
    names = ["token_embedding", "positional_embedding"]
    for i in range(cfg.n_layers):
        names += [layer_key(i, n) for n in LAYER_TENSORS]
    return names + ["final_norm", "unembedding"]


def validate_shapes(cfg: ModelConfig, shapes: Dict[str, Tuple[int, ...]]) -> None:
    """Check a shape table against the config; per-layer widths may vary."""
    missing = [n for n in expected_names(cfg) if n not in shapes]
    if missing:
        raise ValueError(f"missing tensors: {missing}")
    extra = sorted(set(shapes) - set(expected_names(cfg)))
    if extra:
        raise ValueError(f"unexpected tensors: {extra}")
    V, d, hd = cfg.vocab_size, cfg.d_model, cfg.head_dim

    def want(name, shape):
        if tuple(shapes[name]) != tuple(shape):
            raise ValueError(f"tensor {name} has shape {tuple(shapes[name])}, expected {tuple(shape)}")

    want("token_embedding", (V, d))
    want("positional_embedding", (cfg.max_seq_len, d))
    want("final_norm", (d,))
    want("unembedding", (d, V))
    for i in range(cfg.n_layers):
        hq = shapes[layer_key(i, "attn_q")]
        if len(hq) != 2 or hq[1] % hd or hq[1] == 0:
            raise ValueError(f"tensor {layer_key(i, 'attn_q')} has shape {tuple(hq)}, not d_model x heads*{hd}")
        width = hq[1]
        inter = shapes[layer_key(i, "mlp_down")][0]
        want(layer_key(i, "norm1"), (d,))
        want(layer_key(i, "norm2"), (d,))
        for n in ("attn_q", "attn_k", "attn_v"):
            want(layer_key(i, n), (d, width))
        want(layer_key(i, "attn_o"), (width, d))
        want(layer_key(i, "mlp_gate"), (d, inter))
        want(layer_key(i, "mlp_up"), (d, inter))
        want(layer_key(i, "mlp_down"), (inter, d))


def init_model(cfg: ModelConfig, seed: int = 0, init_scale: float = 1.0) -> ToyModel:
    """Random init: N(0, init_scale^2 / fan_in) matrices, unit norm scales."""
    rng = np.random.default_rng(seed)
    d, V = cfg.d_model, cfg.vocab_size
    width = cfg.n_heads * cfg.head_dim

    def mat(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, init_scale * scale / np.sqrt(fan_in), size=(fan_in, fan_out))

    t: Dict[str, np.ndarray] = {
        "token_embedding": rng.normal(0.0, init_scale, size=(V, d)),
        "positional_embedding": rng.normal(0.0, 0.1 * init_scale, size=(cfg.max_seq_len, d)),
    }
    resid_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        t[layer_key(i, "norm1")] = np.ones(d)
        t[layer_key(i, "attn_q")] = mat(d, width)
        t[layer_key(i, "attn_k")] = mat(d, width)
        t[layer_key(i, "attn_v")] = mat(d, width)
        t[layer_key(i, "attn_o")] = mat(width, d, resid_scale)
        t[layer_key(i, "norm2")] = np.ones(d)
        t[layer_key(i, "mlp_gate")] = mat(d, cfg.d_intermediate)
        t[layer_key(i, "mlp_up")] = mat(d, cfg.d_intermediate)
        t[layer_key(i, "mlp_down")] = mat(cfg.d_intermediate, d, resid_scale)
    t["final_norm"] = np.ones(d)
    t["unembedding"] = mat(d, V)
    return ToyModel(cfg, t)


@dataclass
class KVCache:
    """Per-layer keys/values, each ``(batch, cached_len, heads * head_dim)``."""

    keys: List[np.ndarray]
    values: List[np.ndarray]

    @property
    def cached_len(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[1]

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0]

    @classmethod
    def empty(cls, model: ToyModel, batch: int = 1) -> "KVCache":
        hd = model.config.head_dim
        ks = [np.zeros((batch, 0, model.n_heads(i) * hd)) for i in range(model.config.n_layers)]
        vs = [k.copy() for k in ks]
        return cls(ks, vs)

    def expand(self, batch: int) -> "KVCache":
        """Broadcast a batch-1 cache (a shared prefix) to ``batch`` rows."""
        if self.batch == batch:
            return self
        if self.batch != 1:
            raise ValueError(f"cannot expand cache of batch {self.batch} to {batch}")
        return KVCache(
            [np.repeat(k, batch, axis=0) for k in self.keys],
            [np.repeat(v, batch, axis=0) for v in self.values],
        )


@dataclass
class ForwardResult:
    logits: np.ndarray
    taps: Dict[Tuple[int, str], np.ndarray]
    cache: KVCache


class _Profile:
    """Accumulates wall time per block kind when passed to forward."""

    def __init__(self):
        self.totals: Dict[str, float] = {"attention": 0.0, "mlp": 0.0, "other": 0.0}

    @contextmanager
    def section(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0


@contextmanager
def _nullsection(name):
    yield


def new_profile() -> _Profile:
    return _Profile()


def _rms(x, g, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * g, inv


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def softmax(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def _fake_quant_act(x: np.ndarray, site_q: dict) -> np.ndarray:
    """Divide by the smoothing vector, then dynamic per-tensor fake quantization."""
    x = x / site_q["smooth"]
    if site_q.get("format", "int") == "fp8":
        from ..fp8 import fp8_fake_quant

        return fp8_fake_quant(x)
    qmax = 2 ** (site_q["bits"] - 1) - 1
    amax = float(np.max(np.abs(x)))
    if amax == 0.0:
        return x
    step = amax / qmax
    q = np.clip(np.sign(x) * np.floor(np.abs(x) / step + 0.5), -qmax - 1, qmax)
    return q * step


def _parse_taps(taps, n_layers) -> List[Tuple[int, str]]:
    if taps is None:
        return []
    if taps == "all":
        return [(i, k) for i in range(n_layers) for k in TAP_KINDS]
    out = []
    for sel in taps:
        try:
            i, kind = sel
        except (TypeError, ValueError):
            raise ValueError(f"unknown tap selector {sel!r}; expected (layer, kind)") from None
        if kind not in TAP_KINDS or not (0 <= int(i) < n_layers):
            raise ValueError(f"unknown tap selector {sel!r}")
        out.append((int(i), kind))
    return out


def forward(
    model: ToyModel,
    tokens,
    taps=None,
    cache: Optional[KVCache] = None,
    profile: Optional[_Profile] = None,
    _record: Optional[dict] = None,
) -> ForwardResult:
    """Run the model on ``tokens`` (shape ``(T,)`` or ``(B, T)``).

    With ``cache`` holding a prefix, ``tokens`` is the suffix and positions
    continue after the cached length.  ``taps`` is ``None``, ``"all"`` or a list
    of ``(layer, "attn_o" | "mlp_down")``; each tap is the ``(B*T, d_in)``
    input matrix of that layer.  Logits come back as ``(T, V)`` for 1-D input.
    """
    cfg = model.config
    tok = np.asarray(tokens, dtype=np.int64)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None, :]
    if tok.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tok.shape}")
    B, T = tok.shape
    if np.any(tok < 0) or np.any(tok >= cfg.vocab_size):
        raise ValueError("token id out of range")
    start = 0
    if cache is not None:
        cache = cache.expand(B)
        start = cache.cached_len
    if start + T > cfg.max_seq_len:
        raise ValueError(
            f"context overflow: {start} cached + {T} new tokens > max_seq_len {cfg.max_seq_len}"
        )
    tap_sel = set(_parse_taps(taps, cfg.n_layers))
    sec = profile.section if profile is not None else _nullsection
    t = model.tensors
    eps = cfg.norm_eps
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    aq = model.act_quant or {}

    def site_in(i, site, x):
        site_q = aq.get((i, site))
        return x if site_q is None else _fake_quant_act(x, site_q)

    taps_out: Dict[Tuple[int, str], np.ndarray] = {}
    new_k: List[np.ndarray] = []
    new_v: List[np.ndarray] = []
    rec_layers = []

    with sec("other"):
        x = t["token_embedding"][tok] + t["positional_embedding"][start : start + T][None]
        S = start + T
        qpos = np.arange(start, S)[:, None]
        kpos = np.arange(S)[None, :]
        mask = kpos > qpos  # (T, S)

    for i in range(cfg.n_layers):
        L = {}
        h = model.n_heads(i)
        with sec("attention"):
            r1, inv1 = _rms(x, t[layer_key(i, "norm1")], eps)
            r1q = site_in(i, "attn_qkv", r1)
            q = (r1q @ t[layer_key(i, "attn_q")]).reshape(B, T, h, hd).transpose(0, 2, 1, 3)
            k_flat = r1q @ t[layer_key(i, "attn_k")]
            v_flat = r1q @ t[layer_key(i, "attn_v")]
            if cache is not None:
                k_flat = np.concatenate([cache.keys[i], k_flat], axis=1)
                v_flat = np.concatenate([cache.values[i], v_flat], axis=1)
            new_k.append(k_flat)
            new_v.append(v_flat)
            k = k_flat.reshape(B, S, h, hd).transpose(0, 2, 1, 3)
            v = v_flat.reshape(B, S, h, hd).transpose(0, 2, 1, 3)
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            scores = np.where(mask, -np.inf, scores)
            a = softmax(scores, axis=-1)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, h * hd)
            x1 = x + site_in(i, "attn_o", o) @ t[layer_key(i, "attn_o")]
        with sec("mlp"):
            r2, inv2 = _rms(x1, t[layer_key(i, "norm2")], eps)
            r2q = site_in(i, "mlp_gate_up", r2)
            gp = r2q @ t[layer_key(i, "mlp_gate")]
            up = r2q @ t[layer_key(i, "mlp_up")]
            hmid = _silu(gp) * up
            x2 = x1 + site_in(i, "mlp_down", hmid) @ t[layer_key(i, "mlp_down")]
        if (i, "attn_qkv") in tap_sel:
            taps_out[(i, "attn_qkv")] = r1.reshape(B * T, -1).copy()
        if (i, "mlp_gate_up") in tap_sel:
            taps_out[(i, "mlp_gate_up")] = r2.reshape(B * T, -1).copy()
        if (i, "attn_o") in tap_sel:
            taps_out[(i, "attn_o")] = o.reshape(B * T, -1).copy()
        if (i, "mlp_down") in tap_sel:
            taps_out[(i, "mlp_down")] = hmid.reshape(B * T, -1).copy()
        if _record is not None:
            L.update(x=x, r1=r1, inv1=inv1, q=q, k=k, v=v, a=a, o=o, x1=x1, r2=r2, inv2=inv2, gp=gp, up=up, hmid=hmid)
            rec_layers.append(L)
        x = x2

    with sec("other"):
        rf, invf = _rms(x, t["final_norm"], eps)
        logits = rf @ t["unembedding"]
    if _record is not None:
        _record.update(tok=tok, layers=rec_layers, xf=x, rf=rf, invf=invf, B=B, T=T)
    out_logits = logits[0] if squeeze else logits
    return ForwardResult(out_logits, taps_out, KVCache(new_k, new_v))


def forward_train(model: ToyModel, tokens) -> Tuple[np.ndarray, dict]:
    """Uncached forward that keeps the activations ``backward_from`` needs."""
    rec: dict = {}
    res = forward(model, tokens, _record=rec)
    rec["squeeze"] = np.asarray(tokens).ndim == 1
    return res.logits, rec


def _rms_backward(dy, x, inv, g):
    dg = np.sum(dy * x * inv, axis=tuple(range(dy.ndim - 1)))
    dxh = dy * g
    dx = inv * dxh - x * inv**3 * np.mean(dxh * x, axis=-1, keepdims=True)
    return dx, dg


def backward_from(model: ToyModel, rec: dict, loss_grads) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(loss_grads * logits)`` for every tensor."""
    if model.act_quant:
        raise ValueError("backward is not defined for models with simulated activation quantization")
    cfg = model.config
    t = model.tensors
    B, T = rec["B"], rec["T"]
    dlog = np.asarray(loss_grads, dtype=np.float64)
    if rec["squeeze"]:
        dlog = dlog[None]
    if dlog.shape != (B, T, cfg.vocab_size):
        raise ValueError(f"loss_grads shape {dlog.shape[-2:]} does not match logits ({T}, {cfg.vocab_size})")
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    grads: Dict[str, np.ndarray] = {}

    def wgrad(inp, dout):
        return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])

    grads["unembedding"] = wgrad(rec["rf"], dlog)
    drf = dlog @ t["unembedding"].T
    dx, grads["final_norm"] = _rms_backward(drf, rec["xf"], rec["invf"], t["final_norm"])

    for i in reversed(range(cfg.n_layers)):
        L = rec["layers"][i]
        h = model.n_heads(i)
        # MLP block
        grads[layer_key(i, "mlp_down")] = wgrad(L["hmid"], dx)
        dh = dx @ t[layer_key(i, "mlp_down")].T
        sg = _sigmoid(L["gp"])
        dup = dh * L["gp"] * sg
        dgp = dh * L["up"] * sg * (1.0 + L["gp"] * (1.0 - sg))
        grads[layer_key(i, "mlp_gate")] = wgrad(L["r2"], dgp)
        grads[layer_key(i, "mlp_up")] = wgrad(L["r2"], dup)
        dr2 = dgp @ t[layer_key(i, "mlp_gate")].T + dup @ t[layer_key(i, "mlp_up")].T
        dx1n, grads[layer_key(i, "norm2")] = _rms_backward(dr2, L["x1"], L["inv2"], t[layer_key(i, "norm2")])
        dx1 = dx + dx1n
        # attention block
        grads[layer_key(i, "attn_o")] = wgrad(L["o"], dx1)
        do = (dx1 @ t[layer_key(i, "attn_o")].T).reshape(B, T, h, hd).transpose(0, 2, 1, 3)
        a, q, k, v = L["a"], L["q"], L["k"], L["v"]
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def flat(z):
            return z.transpose(0, 2, 1, 3).reshape(B, T, h * hd)

        dq, dk, dv = flat(dq), flat(dk), flat(dv)
        r1 = L["r1"]
        grads[layer_key(i, "attn_q")] = wgrad(r1, dq)
        grads[layer_key(i, "attn_k")] = wgrad(r1, dk)
        grads[layer_key(i, "attn_v")] = wgrad(r1, dv)
        dr1 = dq @ t[layer_key(i, "attn_q")].T + dk @ t[layer_key(i, "attn_k")].T + dv @ t[layer_key(i, "attn_v")].T
        dxn, grads[layer_key(i, "norm1")] = _rms_backward(dr1, L["x"], L["inv1"], t[layer_key(i, "norm1")])
        dx = dx1 + dxn

    demb = np.zeros_like(t["token_embedding"])
    np.add.at(demb, rec["tok"].reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["token_embedding"] = demb
    dpos = np.zeros_like(t["positional_embedding"])
    dpos[:T] = dx.sum(axis=0)
    grads["positional_embedding"] = dpos
    return grads


def backward(model: ToyModel, tokens, loss_grads) -> Dict[str, np.ndarray]:
    """Gradients of ``sum(loss_grads * logits(tokens))`` w.r.t. every tensor."""
    lg = np.asarray(loss_grads, dtype=np.float64)
    if not np.all(np.isfinite(lg)):
        raise ValueError("loss_grads must be finite")
    _, rec = forward_train(model, tokens)
    return backward_from(model, rec, lg)


def count_params(model: ToyModel) -> int:
    return int(sum(v.size for v in model.tensors.values()))


def flops_prefill(model: ToyModel, seq_len: int) -> int:
    """Matmul FLOPs of a full prefill of ``seq_len`` tokens.

    Each ``(m x k) @ (k x n)`` product counts ``2 m k n``.  Per layer with
    ``w = heads * head_dim``: q/k/v ``3 * 2 T d w``, output ``2 T w d``,
    attention scores and value mixing ``2 * 2 h T^2 head_dim`` (full square,
    the causal mask is not credited), MLP ``3 * 2 T d inter``.  Plus the
    unembedding ``2 T d V``.  Norms, softmax and embedding lookups are ignored.
    """
    cfg = model.config
    T, d, hd = int(seq_len), cfg.d_model, cfg.head_dim
    total = 2 * T * d * cfg.vocab_size
    for i in range(cfg.n_layers):
        h = model.n_heads(i)
        w = h * hd
        inter = model.d_intermediate(i)
        total += 3 * 2 * T * d * w + 2 * T * w * d
        total += 2 * 2 * h * T * T * hd
        total += 3 * 2 * T * d * inter
    return int(total)


def attention_params(model: ToyModel) -> int:
    return int(
        sum(model.layer(i, n).size for i in range(model.config.n_layers) for n in ("attn_q", "attn_k", "attn_v", "attn_o"))
    )
