"""Inverted channel embedding, low-rank channel enhancer and encoder stack.

Tokens are variates: an input window (T, N) becomes N tokens of width D.
All functions accept extra leading batch axes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numkit as nk
from .numkit import Tensor

PREDICTORS = ("acf", "ci", "cd", "mlp")


@dataclass
class ModelConfig:
    lookback: int          # T
    horizon: int           # L
    n_channels: int        # N
    d_model: int = 128     # D
    rank: int = 64         # r
    topk: int = 2          # k
    n_heads: int = 8       # h
    n_layers: int = 2      # J
    d_ff: int = 2048       # F
    dropout: float = 0.1
    predictor: str = "acf"
    use_ace: bool = True
    share_predictor: bool = False

    def __post_init__(self):
        problems = []
        if self.lookback < 1 or self.horizon < 1 or self.n_channels < 1:
            problems.append("lookback, horizon and n_channels must be >= 1")
        if not 1 <= self.rank <= self.d_model:
            problems.append(f"rank={self.rank} must lie in [1, d_model={self.d_model}]")
        if not 1 <= self.topk <= self.n_channels:
            problems.append(f"topk={self.topk} must lie in [1, n_channels={self.n_channels}]")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            problems.append("n_layers must be >= 1")
        if self.d_ff < 1:
            problems.append("d_ff must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.predictor not in PREDICTORS:
            problems.append(f"predictor must be one of {PREDICTORS}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def uniform(rng: np.random.Generator, shape, fan_in: int, name=None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    y = nk.matmul(x, nk.transpose(w))
    return y if b is None else y + b


# ---------------------------------------------------------------- parameters

@dataclass
class EmbeddingParams:
    W: Tensor  # (D, T)
    b: Tensor  # (D,)

    @classmethod
    def init(cls, cfg: ModelConfig, rng):
        T, D = cfg.lookback, cfg.d_model
        return cls(W=uniform(rng, (D, T), T), b=uniform(rng, (D,), T))


@dataclass
class AceParams:
    down: Tensor  # (r, D)
    up: Tensor    # (D, r), zero at init

    @classmethod
    def init(cls, cfg: ModelConfig, rng):
        return cls(down=uniform(rng, (cfg.rank, cfg.d_model), cfg.d_model),
                   up=zeros((cfg.d_model, cfg.rank)))


@dataclass
class EncoderLayerParams:
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    bk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    W1: Tensor  # (F, D)
    b1: Tensor
    W2: Tensor  # (D, F)
    b2: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng):
        D, F = cfg.d_model, cfg.d_ff
        t = {}
        for name in ("q", "k", "v", "o"):
            t[f"W{name}"] = uniform(rng, (D, D), D)
            t[f"b{name}"] = uniform(rng, (D,), D)
        t["W1"], t["b1"] = uniform(rng, (F, D), D), uniform(rng, (F,), D)
        t["W2"], t["b2"] = uniform(rng, (D, F), F), uniform(rng, (D,), F)
        return cls(**t)


# ---------------------------------------------------------------- operations

def embed(x_t, p: EmbeddingParams) -> Tensor:
    """(..., N, T) channel histories -> (..., N, D) tokens, one per variate."""
    x_t = nk.as_tensor(x_t)
    if x_t.shape[-1] != p.W.shape[1]:
        raise ValueError(f"embed: history length {x_t.shape[-1]} != lookback {p.W.shape[1]}")
    return linear(x_t, p.W, p.b)


def ace_enhance(tokens, p: AceParams) -> Tensor:
    """Residual low-rank enhancement ``x + up @ (down @ x)`` per token."""
    tokens = nk.as_tensor(tokens)
    if tokens.shape[-1] != p.down.shape[1]:
        raise ValueError(f"ace_enhance: token width {tokens.shape[-1]} != {p.down.shape[1]}")
    low = linear(tokens, p.down)
    return tokens + linear(low, p.up)


def instance_norm(tokens, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its D features; no cross-token statistics."""
    return nk.standardize_rows(tokens, eps)


def multi_head_attention(x, p: EncoderLayerParams, n_heads: int, return_weights=False):
    """Scaled dot-product self-attention across the token (channel) axis."""
    x = nk.as_tensor(x)
    *lead, n, d = x.shape
    dh = d // n_heads

    def heads(t):
        t = nk.reshape(t, (*lead, n, n_heads, dh))
        return nk.transpose(t, tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2)))

    q = heads(linear(x, p.Wq, p.bq))
    k = heads(linear(x, p.Wk, p.bk))
    v = heads(linear(x, p.Wv, p.bv))
    scores = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(dh))
    attn = nk.softmax_rows(scores)               # (..., h, N, N)
    ctx = nk.matmul(attn, v)                      # (..., h, N, dh)
    ctx = nk.transpose(ctx, tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2)))
    out = linear(nk.reshape(ctx, (*lead, n, d)), p.Wo, p.bo)
    return (out, attn) if return_weights else out


def feed_forward(x, p: EncoderLayerParams) -> Tensor:
    return linear(nk.relu(linear(x, p.W1, p.b1)), p.W2, p.b2)


def encoder_layer(x, p: EncoderLayerParams, cfg: ModelConfig, rng=None) -> Tensor:
    """Pre-norm block with instance norm in place of layer norm."""
    x = nk.as_tensor(x)
    x = x + nk.dropout(multi_head_attention(instance_norm(x), p, cfg.n_heads), cfg.dropout, rng)
    return x + nk.dropout(feed_forward(instance_norm(x), p), cfg.dropout, rng)


def encode(x_norm, embedding: EmbeddingParams, ace: AceParams | None,
           layers, cfg: ModelConfig, rng=None) -> Tensor:
    """(..., T, N) normalized window -> (..., N, D) encoded tokens.

    ``ace=None`` removes the enhancer entirely.
    """
    x_norm = np.asarray(x_norm)
    h = embed(np.swapaxes(x_norm, -1, -2), embedding)
    if ace is not None:
        h = ace_enhance(h, ace)
    for lp in layers:
        h = encoder_layer(h, lp, cfg, rng)
    return h
