"""Predicted inter-channel relevance from the normalized input window."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import linear, uniform
from .numkit import Tensor


@dataclass
class SimblockParams:
    W: Tensor  # (N, N), applied to each row of the Gram matrix
    b: Tensor  # (N,)

    @classmethod
    def init(cls, n_channels: int, rng):
        return cls(W=uniform(rng, (n_channels, n_channels), n_channels),
                   b=uniform(rng, (n_channels,), n_channels))


def corr(x_norm) -> np.ndarray:
    """Gram matrix ``X^T X`` of a (..., T, N) window, shape (..., N, N)."""
    x = np.asarray(x_norm)
    return np.swapaxes(x, -1, -2) @ x


def simblock_forward(w, p: SimblockParams) -> Tensor:
    """``softmax_rows(W + relu(W @ W_lin^T + b_lin))``; rows are stochastic."""
    w = nk.as_tensor(w)
    n = p.W.shape[0]
    if w.shape[-2:] != (n, n):
        raise ValueError(f"simblock_forward: expected (..., {n}, {n}), got {w.shape}")
    return nk.softmax_rows(w + nk.relu(linear(w, p.W, p.b)))


AUX_SCALES = ("length", "raw")


def target_gram(y_norm, scale: str = "length") -> np.ndarray:
    """Channel-major Gram matrix of the normalized horizon, (..., N, N).

    ``scale="length"`` divides by the horizon length, which turns the Gram
    of a normalized horizon into its correlation matrix and puts it on the
    same footing as the row-stochastic ``W_dec``. ``"raw"`` keeps ``Y^T Y``.
    """
    if scale not in AUX_SCALES:
        raise ValueError(f"aux scale must be one of {AUX_SCALES}, got {scale!r}")
    g = corr(y_norm)
    return g / np.asarray(y_norm).shape[-2] if scale == "length" else g


def frobenius_sq(a, b) -> Tensor:
    """``||a - b||_F^2`` per matrix, averaged over any batch axes."""
    a, b = nk.as_tensor(a), nk.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return nk.mean(nk.sum_(nk.square(a - b), axis=(-2, -1)))


def aux_loss(w_dec, y_norm, scale: str = "length") -> Tensor:
    """Distance between predicted relevance and the realized horizon Gram."""
    return frobenius_sq(w_dec, target_gram(y_norm, scale))
