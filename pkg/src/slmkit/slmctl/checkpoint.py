"""Checkpoints: a JSON manifest next to a raw little-endian float32 blob.

Layout of a checkpoint directory::

    manifest.json   format_version, model config, one entry per tensor
                    (name, shape, dtype, offset, nbytes), activation-quant metadata
    tensors.bin     tensors back to back in manifest order

Tensors are stored at 32-bit precision and widened to float64 on load, so
``load(save(m))`` is the identity on any model already rounded through float32.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..toylm.model import ModelConfig, ToyModel, validate_shapes

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def _aq_name(layer: int, site: str) -> str:
    return f"act_quant.{layer}.{site}.smooth"


def save_checkpoint(model: ToyModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = list(model.tensors.items())
    aq_meta = []
    for (i, site), site_q in sorted((model.act_quant or {}).items()):
        arrays.append((_aq_name(i, site), np.asarray(site_q["smooth"])))
        aq_meta.append({"layer": i, "site": site, "bits": int(site_q["bits"]), "format": site_q.get("format", "int")})
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as f:
        for name, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            f.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "act_quant": aq_meta if model.act_quant is not None else None,
    }
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, path / MANIFEST)


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CheckpointError("corrupt manifest: missing format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"format version mismatch: checkpoint has {manifest['format_version']}, reader supports {FORMAT_VERSION}"
        )
    for key in ("config", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"corrupt manifest: missing {key}")
    return manifest


def load_checkpoint(path) -> ToyModel:
    path = Path(path)
    manifest = _read_manifest(path)
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt manifest config: {e}") from None
    blob = (path / BLOB).read_bytes()
    arrays: Dict[str, np.ndarray] = {}
    spans = []
    for e in manifest["tensors"]:
        try:
            name, shape, off, nbytes = e["name"], tuple(int(s) for s in e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"corrupt manifest entry: {e!r}") from None
        if e.get("dtype", "float32") != "float32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {e.get('dtype')}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name}: nbytes {nbytes} does not match shape {shape}")
        if off < 0 or off + nbytes > len(blob):
            raise CheckpointError(
                f"tensor {name} out of bounds: bytes [{off}, {off + nbytes}) but blob has {len(blob)}"
            )
        spans.append((off, off + nbytes, name))
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // 4, offset=off).reshape(shape).astype(np.float64)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an} and {bn} overlap")

    act_quant = None
    if manifest.get("act_quant") is not None:
        act_quant = {}
        for m in manifest["act_quant"]:
            key = _aq_name(m["layer"], m["site"])
            if key not in arrays:
                raise CheckpointError(f"missing activation smoothing tensor {key}")
            act_quant[(int(m["layer"]), m["site"])] = {"smooth": arrays.pop(key), "bits": int(m["bits"]),
                                                       "format": m["format"]}
    shapes: Dict[str, Tuple[int, ...]] = {k: v.shape for k, v in arrays.items()}
    try:
        validate_shapes(config, shapes)
    except ValueError as e:
        raise CheckpointError(f"shape validation failed: {e}") from None
    return ToyModel(config, arrays, act_quant)


def round_to_storage(model: ToyModel) -> ToyModel:
    """The model as it would come back from a checkpoint."""
    out = model.copy()
    for k, v in out.tensors.items():
        out.tensors[k] = v.astype(np.float32).astype(np.float64)
    for site_q in (out.act_quant or {}).values():
        site_q["smooth"] = np.asarray(site_q["smooth"]).astype(np.float32).astype(np.float64)
    return out
