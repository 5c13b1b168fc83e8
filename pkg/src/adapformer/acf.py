"""Adaptive channel forecaster: per-target top-k selection and prediction.

For target ``i`` the encoder tokens of ``C_i = [i, c_1, ..., c_{k-1}]`` are
gathered, flattened to one ``k*D`` vector and passed through a residual MLP
whose skip path is the target's own token. Only the target's horizon is
produced. Selection is an index computation and carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import ModelConfig, uniform
from .numkit import Tensor


def select_all(w_dec, k: int) -> np.ndarray:
    """Index sets for every target row: (..., N, N) -> (..., N, k).

    Row ``i`` is ``[i]`` followed by the ``k-1`` largest off-diagonal entries
    of ``w_dec[..., i, :]``; equal values go to the lower index.
    """
    w = np.array(w_dec.data if isinstance(w_dec, Tensor) else w_dec, dtype=np.float64)
    n = w.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    self_idx = np.broadcast_to(np.arange(n)[:, None], w.shape[:-1] + (1,))
    if k == 1:
        return np.ascontiguousarray(self_idx)
    m = k - 1
    diag = np.arange(n)
    w[..., diag, diag] = -np.inf
    rows = w.reshape(-1, n)
    cols = np.sort(np.argpartition(-rows, m - 1, axis=-1)[:, :m], axis=-1)
    vals = np.take_along_axis(rows, cols, axis=-1)
    # a tie straddling the cut may have admitted a higher index; redo those rows
    thr = vals.min(axis=-1, keepdims=True)
    tied = np.nonzero((rows >= thr).sum(axis=-1) > m)[0]
    if tied.size:
        cols[tied] = _exact_top(rows[tied], m)
        vals[tied] = np.take_along_axis(rows[tied], cols[tied], axis=-1)
    order = np.take_along_axis(cols, np.argsort(-vals, axis=-1, kind="stable"), axis=-1)
    return np.concatenate([self_idx, order.reshape(w.shape[:-1] + (m,))], axis=-1)


def _exact_top(rows, m):
    """Ascending column indices of the m largest entries, lower index first on ties."""
    thr = -np.partition(-rows, m - 1, axis=-1)[:, m - 1:m]
    above = rows > thr
    at = rows == thr
    room = m - above.sum(axis=-1, keepdims=True)
    chosen = above | (at & (np.cumsum(at, axis=-1) <= room))
    return np.nonzero(chosen)[1].reshape(len(rows), m)


def select_channels(w_dec, i: int, k: int) -> list[int]:
    """Selection set ``C_i`` for one target of an (N, N) relevance matrix."""
    w = np.asarray(w_dec.data if isinstance(w_dec, Tensor) else w_dec)
    if w.ndim != 2:
        raise ValueError("select_channels expects a single (N, N) matrix")
    if not 0 <= i < w.shape[0]:
        raise ValueError(f"target {i} out of range for N={w.shape[0]}")
    return [int(c) for c in select_all(w, k)[i]]


@dataclass
class PredictorParams:
    """Residual MLP heads. Leading axis is N (independent) or 1 (shared)."""
    Wa: Tensor  # (P, D, k*D)
    ba: Tensor  # (P, D)
    Wb: Tensor  # (P, L, D)
    bb: Tensor  # (P, L)

    @classmethod
    def init(cls, n_heads: int, k: int, d_model: int, horizon: int, rng):
        kd = k * d_model
        return cls(Wa=uniform(rng, (n_heads, d_model, kd), kd),
                   ba=uniform(rng, (n_heads, d_model), kd),
                   Wb=uniform(rng, (n_heads, horizon, d_model), d_model),
                   bb=uniform(rng, (n_heads, horizon), d_model))

    @property
    def shared(self) -> bool:
        return self.Wa.shape[0] == 1

    @property
    def k(self) -> int:
        return self.Wa.shape[2] // self.Wa.shape[1]


@dataclass
class FlatHeadParams:
    """All-channel affine head: flattened (N*D) tokens -> (N*L) horizon."""
    W: Tensor  # (N*L, N*D)
    b: Tensor  # (N*L,)

    @classmethod
    def init(cls, n: int, d_model: int, horizon: int, rng):
        return cls(W=uniform(rng, (n * horizon, n * d_model), n * d_model),
                   b=uniform(rng, (n * horizon,), n * d_model))


def predict_one(h_c, params: PredictorParams, target: int = 0) -> Tensor:
    """Horizon for one target from its (k, D) gathered tokens, row 0 = target.

    ``Z = h_c + relu(Wa vec(h_c) + ba)`` on the target row, then
    ``Wb Z + bb``. Returns a length-L vector.
    """
    h_c = nk.as_tensor(h_c)
    k, d = h_c.shape
    if k * d != params.Wa.shape[2]:
        raise ValueError(f"predict_one: got {k}x{d} tokens, predictor expects k*D={params.Wa.shape[2]}")
    j = 0 if params.shared else target
    wa, ba = nk.take(params.Wa, j), nk.take(params.ba, j)
    wb, bb = nk.take(params.Wb, j), nk.take(params.bb, j)
    flat = nk.reshape(h_c, (1, k * d))
    z = nk.reshape(nk.take(h_c, 0), (1, d)) + nk.relu(nk.matmul(flat, nk.transpose(wa)) + ba)
    return nk.reshape(nk.matmul(z, nk.transpose(wb)) + bb, (-1,))


def acf_forecast(h, index, params: PredictorParams) -> Tensor:
    """(B, N, D) tokens and (B, N, k) selections -> (B, N, L) normalized horizon."""
    h = nk.as_tensor(h)
    b, n, d = h.shape
    k = index.shape[-1]
    if k * d != params.Wa.shape[2]:
        raise ValueError(f"acf_forecast: index width {k} does not match predictor k={params.k}")
    gathered = nk.gather_rows(h, index)                   # (B, N, k, D)
    flat = nk.reshape(gathered, (b, n, k * d))
    if params.shared:
        hid = nk.matmul(flat, nk.transpose(params.Wa)) + params.ba
        z = h + nk.relu(hid)
        return nk.matmul(z, nk.transpose(params.Wb)) + params.bb
    # one small matmul per target, batched over targets
    per_target = (1, 0, 2)
    hid = nk.transpose(nk.matmul(nk.transpose(flat, per_target), nk.transpose(params.Wa)), per_target)
    z = h + nk.relu(hid + params.ba)
    out = nk.matmul(nk.transpose(z, per_target), nk.transpose(params.Wb))
    return nk.transpose(out, per_target) + params.bb


def flat_forecast(h, params: FlatHeadParams) -> Tensor:
    """Channel-dependent head mixing all N tokens at once."""
    h = nk.as_tensor(h)
    b, n, d = h.shape
    out = nk.matmul(nk.reshape(h, (b, 1, n * d)), nk.transpose(params.W)) + params.b
    return nk.reshape(out, (b, n, -1))


def predictor_heads(cfg: ModelConfig) -> tuple[int, int]:
    """(number of parameter sets, effective k) for a config's predictor mode."""
    if cfg.predictor == "acf":
        return (1 if cfg.share_predictor else cfg.n_channels), cfg.topk
    if cfg.predictor == "ci":
        return (1 if cfg.share_predictor else cfg.n_channels), 1
    if cfg.predictor == "mlp":
        return 1, 1
    raise ValueError(f"predictor {cfg.predictor!r} has no per-target heads")
