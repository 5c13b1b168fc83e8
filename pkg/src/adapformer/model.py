"""The full forecaster: RevIN -> embedding -> ACE -> encoders -> ACF, with SimBlock."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .acf import FlatHeadParams, PredictorParams, acf_forecast, flat_forecast, predictor_heads, select_all
from .encoder import AceParams, EmbeddingParams, EncoderLayerParams, ModelConfig, encode
from .numkit import Tensor
from .revin import RevinState, revin_denorm, revin_norm
from .simblock import SimblockParams, corr, simblock_forward

# fixed stream ids so toggling a component never shifts another's init
_STREAM = {"embedding": 0, "ace": 1, "layers": 2, "simblock": 3, "predictor": 4}


@dataclass
class ForwardResult:
    pred: Tensor          # (B, L, N) on the input's scale
    pred_norm: Tensor     # (B, L, N) RevIN-normalized
    w_dec: Tensor         # (B, N, N)
    index: np.ndarray     # (B, N, k) selections, empty for the flat head
    state: RevinState
    encoded: Tensor       # (B, N, D)


class Adapformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rngs = {k: np.random.default_rng([seed, v]) for k, v in _STREAM.items()}
        self.embedding = EmbeddingParams.init(cfg, rngs["embedding"])
        self.ace = AceParams.init(cfg, rngs["ace"]) if cfg.use_ace else None
        self.layers = [EncoderLayerParams.init(cfg, rngs["layers"]) for _ in range(cfg.n_layers)]
        self.simblock = SimblockParams.init(cfg.n_channels, rngs["simblock"])
        if cfg.predictor == "cd":
            self.head = FlatHeadParams.init(cfg.n_channels, cfg.d_model, cfg.horizon, rngs["predictor"])
        else:
            n_sets, k = predictor_heads(cfg)
            self.head = PredictorParams.init(n_sets, k, cfg.d_model, cfg.horizon, rngs["predictor"])
        self.dropout_rng = np.random.default_rng([seed, 99])
        for name, t in self.named_parameters():
            t.name = name

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding.W", self.embedding.W), ("embedding.b", self.embedding.b)]
        if self.ace is not None:
            out += [("ace.down", self.ace.down), ("ace.up", self.ace.up)]
        for i, lp in enumerate(self.layers):
            out += [(f"layers.{i}.{f}", getattr(lp, f)) for f in lp.__dataclass_fields__]
        out += [("simblock.W", self.simblock.W), ("simblock.b", self.simblock.b)]
        out += [(f"head.{f}", getattr(self.head, f)) for f in self.head.__dataclass_fields__]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, t in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    # ------------------------------------------------------------ forward

    def selections(self, w_dec) -> np.ndarray:
        if self.cfg.predictor == "acf":
            return select_all(w_dec, self.cfg.topk)
        return select_all(w_dec, 1)

    def forward(self, x) -> ForwardResult:
        """Forecast a batch of (B, T, N) windows."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        cfg = self.cfg
        if x.shape[1:] != (cfg.lookback, cfg.n_channels):
            raise ValueError(f"expected windows of shape (B, {cfg.lookback}, {cfg.n_channels}), got {x.shape}")
        x_norm, state = revin_norm(x)
        h = encode(x_norm, self.embedding, self.ace, self.layers, cfg, self.dropout_rng)
        w_dec = simblock_forward(corr(x_norm), self.simblock)
        if cfg.predictor == "cd":
            index = np.empty((x.shape[0], cfg.n_channels, 0), dtype=np.intp)
            out = flat_forecast(h, self.head)
        else:
            index = self.selections(w_dec.data)
            out = acf_forecast(h, index, self.head)
        pred_norm = nk.transpose(out)             # (B, L, N)
        return ForwardResult(pred=revin_denorm(pred_norm, state), pred_norm=pred_norm,
                             w_dec=w_dec, index=index, state=state, encoded=h)

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode forecasts without graph recording, (W, L, N)."""
        x = np.asarray(x, dtype=np.float64)
        outs = []
        with nk.evaluation(), nk.no_grad():
            for s in range(0, len(x), batch_size):
                outs.append(self.forward(x[s:s + batch_size]).pred.data)
        if not outs:
            return np.empty((0, self.cfg.horizon, self.cfg.n_channels))
        return np.concatenate(outs, axis=0)

    def relevance(self, x, batch_size: int = 256) -> np.ndarray:
        """SimBlock's W_dec for each window, (W, N, N)."""
        x = np.asarray(x, dtype=np.float64)
        outs = []
        with nk.no_grad():
            for s in range(0, len(x), batch_size):
                x_norm, _ = revin_norm(x[s:s + batch_size])
                outs.append(simblock_forward(corr(x_norm), self.simblock).data)
        return np.concatenate(outs, axis=0)
