"""Dense numeric core shared by the pruning and quantization solvers.

Everything here works on float64 numpy arrays.  A layer's calibration
activations ``X`` (n x d) are never kept around; only the Gram matrix
``H = X^T X`` is accumulated, and every layerwise objective is evaluated
through it:

    ||X W - X W_hat||_F^2 = tr((W - W_hat)^T H (W - W_hat))
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

DEFAULT_LAMBDA_REL = 0.01


class NumericError(ArithmeticError):
    """A factorization or solve failed even after damping."""


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (copying only if needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class LayerCalibration:
    """Streaming Gram matrix for the inputs of one linear layer."""

    dim: int
    gram: np.ndarray = None  # type: ignore[assignment]
    n_tokens: int = 0
    cross: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gram is None:
            self.gram = np.zeros((self.dim, self.dim))
        else:
            self.gram = as_dense(self.gram, "gram")
            if self.gram.shape != (self.dim, self.dim):
                raise ValueError(
                    f"gram shape {self.gram.shape} does not match dim {self.dim}"
                )

    @classmethod
    def from_inputs(cls, X, dim: Optional[int] = None) -> "LayerCalibration":
        X = as_dense(X, "X")
        calib = cls(dim=X.shape[1] if dim is None else dim)
        return gram_accumulate(calib, X)

    def copy(self) -> "LayerCalibration":
        return LayerCalibration(
            dim=self.dim,
            gram=self.gram.copy(),
            n_tokens=self.n_tokens,
            cross=None if self.cross is None else self.cross.copy(),
        )

    def check_ready(self) -> None:
        if self.n_tokens < 1:
            raise ValueError("calibration has no tokens; accumulate inputs first")

    def sub(self, idx: Sequence[int]) -> "LayerCalibration":
        """Calibration restricted to the input dims ``idx`` (in that order)."""
        idx = np.asarray(idx, dtype=int)
        return LayerCalibration(
            dim=len(idx), gram=self.gram[np.ix_(idx, idx)].copy(), n_tokens=self.n_tokens
        )


@dataclass
class DampedFactor:
    dim: int
    lower_factor: np.ndarray
    lam: float
    inverse: np.ndarray
    damped: np.ndarray = field(repr=False)


def gram_accumulate(calib: LayerCalibration, X) -> LayerCalibration:
    """Return a new calibration with ``X^T X`` added to the Gram matrix."""
    X = as_dense(X, "X")
    if X.shape[1] != calib.dim:
        raise ValueError(
            f"dimension mismatch: X has {X.shape[1]} columns, calibration dim is {calib.dim}"
        )
    gram = calib.gram + X.T @ X
    gram = 0.5 * (gram + gram.T)
    return LayerCalibration(dim=calib.dim, gram=gram, n_tokens=calib.n_tokens + X.shape[0])


def merge_calibrations(parts: Iterable[LayerCalibration]) -> LayerCalibration:
    """Sum per-worker partial Grams in the given (fixed) order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    out = LayerCalibration(dim=parts[0].dim)
    for p in parts:
        if p.dim != out.dim:
            raise ValueError(f"cannot merge dims {p.dim} and {out.dim}")
        out.gram = out.gram + p.gram
        out.n_tokens += p.n_tokens
    out.gram = 0.5 * (out.gram + out.gram.T)
    return out


def damping(gram: np.ndarray, lambda_rel: float) -> float:
    d = gram.shape[0]
    if d == 0:
        return 0.0
    mean_diag = float(np.trace(gram)) / d
    lam = lambda_rel * mean_diag
    if lam <= 0 and lambda_rel > 0:
        # all-zero Gram: fall back to absolute damping so the factor exists
        lam = lambda_rel
    return lam


def cholesky_lower(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``A``; raises NumericError naming the failing pivot."""
    L, info = lapack.dpotrf(np.asarray(A, dtype=np.float64), lower=1, clean=1)
    if info > 0:
        raise NumericError(f"Cholesky failed: pivot {info - 1} is not positive")
    if info < 0:
        raise NumericError(f"Cholesky called with invalid argument {-info}")
    return L


def damp_and_factor(calib: LayerCalibration, lambda_rel: float = DEFAULT_LAMBDA_REL) -> DampedFactor:
    """Cholesky factor and explicit inverse of ``H + lambda I``.

    ``lambda = lambda_rel * mean(diag(H))``.  Dead calibration dims (zero
    rows/cols of H) end up with inverse diagonal ``1 / lambda``.
    """
    if lambda_rel <= 0:
        raise ValueError(f"lambda_rel must be > 0, got {lambda_rel}")
    lam = damping(calib.gram, lambda_rel)
    A = calib.gram + lam * np.eye(calib.dim)
    L = cholesky_lower(A)
    Linv = solve_triangular(L, np.eye(calib.dim), lower=True)
    inv = Linv.T @ Linv
    inv = 0.5 * (inv + inv.T)
    return DampedFactor(dim=calib.dim, lower_factor=L, lam=lam, inverse=inv, damped=A)


def reconstruction_error(calib: LayerCalibration, W, What) -> float:
    """``||X W - X W_hat||_F^2`` evaluated through the Gram matrix."""
    W = as_dense(W, "W")
    What = as_dense(What, "W_hat")
    if W.shape != What.shape:
        raise ValueError(f"shape mismatch: W {W.shape} vs W_hat {What.shape}")
    if W.shape[0] != calib.dim:
        raise ValueError(f"W has {W.shape[0]} rows, calibration dim is {calib.dim}")
    D = W - What
    return max(0.0, float(np.sum(D * (calib.gram @ D))))


def refit_support(
    calib: LayerCalibration,
    W,
    keep: Sequence[int],
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    anchored: bool = False,
) -> np.ndarray:
    """Least-squares refit of the rows ``keep`` with all other rows forced to zero.

    Solves ``(H_SS + lambda I) W_S = H_{S,:} W``, the ridge-damped minimizer
    of the reconstruction error over matrices supported on ``keep``.  With
    ``anchored=True`` the damping pulls toward ``W_S`` instead of zero
    (right-hand side ``H_{S,:} W + lambda W_S``), i.e. the exact minimizer
    under the damped metric ``H + lambda I``; the full support then returns
    ``W`` for any lambda.  ``lambda`` uses the full Gram's mean diagonal so it
    does not change as the support shrinks.
    """
    W = as_dense(W, "W")
    keep = np.asarray(sorted(keep), dtype=int)
    if keep.size == 0:
        raise ValueError("support must be nonempty")
    if keep[0] < 0 or keep[-1] >= calib.dim:
        raise ValueError(f"support indices out of range 0..{calib.dim - 1}")
    if len(np.unique(keep)) != len(keep):
        raise ValueError("support contains duplicate indices")
    H = calib.gram
    lam = damping(H, lambda_rel) if lambda_rel > 0 else 0.0
    A = H[np.ix_(keep, keep)] + lam * np.eye(len(keep))
    rhs = H[keep, :] @ W
    if anchored:
        rhs = rhs + lam * W[keep]
    L = cholesky_lower(A)
    y = solve_triangular(L, rhs, lower=True)
    return solve_triangular(L.T, y, lower=False)


def embed_rows(rows: np.ndarray, keep: Sequence[int], d: int) -> np.ndarray:
    """Place ``rows`` at the indices ``keep`` of a zero d x p matrix."""
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros((d, rows.shape[1]))
    out[np.asarray(sorted(keep), dtype=int)] = rows
    return out
