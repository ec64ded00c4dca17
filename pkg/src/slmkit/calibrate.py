from __future__ import annotations

from typing import Dict, Iterable, Tuple

import numpy as np

from .matcal import LayerCalibration, gram_accumulate
from .toylm.data import SynthDataset
from .toylm.model import ToyModel, forward


def calibration_tokens(data) -> np.ndarray:
    if isinstance(data, SynthDataset):
        return data.sequences
    tok = np.asarray(data, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None]
    return tok


def collect_calibrations(
    model: ToyModel, data, selectors: Iterable[Tuple[int, str]], batch_size: int = 64
) -> Dict[Tuple[int, str], LayerCalibration]:
    """Gram matrices of the inputs of the selected layers over ``data``.

    Batches are accumulated sequentially in dataset order.
    """
    tok = calibration_tokens(data)
    if len(tok) == 0:
        raise ValueError("calibration data is empty")
    selectors = list(selectors)
    calibs: Dict[Tuple[int, str], LayerCalibration] = {}
    for start in range(0, len(tok), batch_size):
        res = forward(model, tok[start : start + batch_size], taps=selectors)
        for key, X in res.taps.items():
            if key not in calibs:
                calibs[key] = LayerCalibration(dim=X.shape[1])
            calibs[key] = gram_accumulate(calibs[key], X)
    return calibs


def activation_absmax(model: ToyModel, data, selectors, batch_size: int = 64) -> Dict[Tuple[int, str], np.ndarray]:
    """Per-input-channel max |activation| of the selected layers."""
    tok = calibration_tokens(data)
    out: Dict[Tuple[int, str], np.ndarray] = {}
    for start in range(0, len(tok), batch_size):
        res = forward(model, tok[start : start + batch_size], taps=list(selectors))
        for key, X in res.taps.items():
            m = np.max(np.abs(X), axis=0)
            out[key] = m if key not in out else np.maximum(out[key], m)
    return out
