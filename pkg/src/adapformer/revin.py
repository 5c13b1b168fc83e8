"""Non-affine reversible instance normalization over each input window."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-5


@dataclass
class RevinState:
    mean: np.ndarray  # (..., 1, N)
    std: np.ndarray   # (..., 1, N), floored at EPS


def revin_norm(x, eps: float = EPS):
    """Standardize each channel over the window's time axis (axis -2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError(f"revin_norm expects (..., T, N) with T >= 1, got {x.shape}")
    mu = x.mean(axis=-2, keepdims=True)
    sd = np.maximum(np.sqrt(((x - mu) ** 2).mean(axis=-2, keepdims=True)), eps)
    return (x - mu) / sd, RevinState(mean=mu, std=sd)


def revin_denorm(y_norm, state: RevinState):
    """``y_norm * std + mean`` per channel; accepts arrays or Tensors."""
    n = state.mean.shape[-1]
    if y_norm.shape[-1] != n:
        raise ValueError(f"revin_denorm: {y_norm.shape[-1]} channels, state has {n}")
    return y_norm * state.std + state.mean
