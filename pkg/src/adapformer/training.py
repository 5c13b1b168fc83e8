"""Loss assembly, the Adam training loop, early stopping and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numkit as nk
from .encoder import ModelConfig
from .metrics import EvalReport, report
from .model import Adapformer
from .numkit import AdamState, Tensor, adam_step
from .simblock import AUX_SCALES, aux_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "adapformer-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    use_aux: bool = True
    lr_decay: float = 0.5
    clip_norm: float | None = None
    aux_scale: str = "length"

    def __post_init__(self):
        if self.aux_scale not in AUX_SCALES:
            raise ValueError(f"aux_scale must be one of {AUX_SCALES}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def total_loss(pred, target, w_dec=None, aux_target=None, use_aux: bool = True, aux_scale: str = "length"):
    """Forecast MSE plus the relevance term scaled by ``1/sqrt(N*N)``.

    ``aux_target`` is the normalized horizon whose Gram matrix ``w_dec`` is
    compared with; it defaults to ``target``. Returns ``(loss, mse, aux)``.
    """
    pred = nk.as_tensor(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"total_loss: prediction {pred.shape} vs target {target.shape}")
    mse = nk.mean(nk.square(pred - target))
    if not use_aux or w_dec is None:
        return mse, mse, None
    aux = aux_loss(w_dec, target if aux_target is None else aux_target, aux_scale)
    n = w_dec.shape[-1]
    return mse + nk.scale(aux, 1.0 / math.sqrt(n * n)), mse, aux


def batch_loss(model: Adapformer, x, y, use_aux: bool = True, aux_scale: str = "length"):
    out = model.forward(x)
    y_norm = (np.asarray(y) - out.state.mean) / out.state.std
    loss, mse, aux = total_loss(out.pred, y, out.w_dec, y_norm, use_aux, aux_scale)
    return loss, mse, aux, out


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is not None and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def train_epoch(model: Adapformer, x, y, state: AdamState, lr: float,
                cfg: TrainConfig, epoch: int = 0, stats: dict | None = None) -> float:
    """One seeded shuffled pass with an Adam step per batch; mean batch loss.

    If ``stats`` is given it receives the largest per-batch gradient norm of
    the SimBlock parameters under ``"simblock_grad_norm"``.
    """
    if len(x) == 0:
        raise ValueError("no training windows")
    order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(x))
    params = model.parameters()
    sim_ids = {id(model.simblock.W), id(model.simblock.b)}
    sim_norm = 0.0
    losses = []
    nk.set_training(True)
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        model.zero_grad()
        try:
            loss, _, _, _ = batch_loss(model, x[idx], y[idx], cfg.use_aux, cfg.aux_scale)
        except nk.NonFiniteError as exc:
            raise NumericalError(f"non-finite activations at epoch {epoch}, batch {s // cfg.batch_size}: {exc}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {s // cfg.batch_size}")
        grads = nk.backward(loss, params)
        sim_norm = max(sim_norm, math.sqrt(sum(float((g * g).sum())
                                               for p, g in zip(params, grads) if id(p) in sim_ids)))
        grads, _ = _clip(grads, cfg.clip_norm)
        adam_step(params, grads, state, lr)
        losses.append(value)
    if stats is not None:
        stats["simblock_grad_norm"] = sim_norm
    return float(np.mean(losses))


def evaluate_loss(model: Adapformer, x, y, use_aux: bool = True, batch_size: int = 256,
                  aux_scale: str = "length") -> float:
    """Sample-weighted mean of the training objective, dropout off."""
    if len(x) == 0:
        raise ValueError("no evaluation windows")
    total = 0.0
    with nk.evaluation(), nk.no_grad():
        for s in range(0, len(x), batch_size):
            xb, yb = x[s:s + batch_size], y[s:s + batch_size]
            try:
                loss, _, _, _ = batch_loss(model, xb, yb, use_aux, aux_scale)
            except nk.NonFiniteError as exc:
                raise NumericalError(f"non-finite activations during evaluation: {exc}") from exc
            total += float(loss.data) * len(xb)
    return total / len(x)


@dataclass
class Checkpoint:
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    best_val: float
    model_config: dict
    train_config: dict
    seed: int
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Adapformer:
        model = Adapformer(ModelConfig.from_dict(self.model_config), seed=self.seed)
        model.load_state_dict(self.params)
        return model

    def adam_state(self, model: Adapformer) -> AdamState:
        names = [n for n, _ in model.named_parameters()]
        return AdamState(m=[self.adam_m[n].copy() for n in names],
                         v=[self.adam_v[n].copy() for n in names], t=self.adam_t)


def _snapshot(model, state: AdamState, epoch, best_val, cfg: TrainConfig, history) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    return Checkpoint(params=model.state_dict(),
                      adam_m={n: m.copy() for n, m in zip(names, state.m)},
                      adam_v={n: v.copy() for n, v in zip(names, state.v)},
                      adam_t=state.t, epoch=epoch, best_val=best_val,
                      model_config=model.cfg.to_dict(), train_config=cfg.to_dict(),
                      seed=model.seed, history=list(history))


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list      # per epoch: epoch, lr, train_loss, val_loss, simblock_grad_norm
    stopped_early: bool


def fit(model: Adapformer, train, val, cfg: TrainConfig, callback=None) -> FitResult:
    """Train until validation loss stalls for ``patience`` epochs in a row.

    The learning rate is multiplied by ``lr_decay`` after every epoch. The
    model is left holding the best-validation weights, which are also
    returned as a checkpoint.
    """
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_va) == 0:
        raise ValueError("empty validation split")
    state = AdamState.for_params(model.parameters())
    lr = cfg.lr
    best, best_ckpt, bad = math.inf, None, 0
    history = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        stats = {}
        train_loss = train_epoch(model, x_tr, y_tr, state, lr, cfg, epoch, stats)
        val_loss = evaluate_loss(model, x_va, y_va, cfg.use_aux, aux_scale=cfg.aux_scale)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss,
                        "simblock_grad_norm": stats["simblock_grad_norm"]})
        log.info("epoch %d lr=%.3g train=%.5f val=%.5f", epoch, lr, train_loss, val_loss)
        if callback is not None:
            callback(history[-1])
        if val_loss < best:
            best, bad = val_loss, 0
            best_ckpt = _snapshot(model, state, epoch, val_loss, cfg, history)
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped = True
                break
        lr *= cfg.lr_decay
    best_ckpt.history = list(history)
    model.load_state_dict(best_ckpt.params)
    return FitResult(checkpoint=best_ckpt, history=history, stopped_early=stopped)


# ---------------------------------------------------------------- checkpoint files
#
# A checkpoint is a NumPy .npz archive. Arrays are stored under
# "param/<name>", "adam_m/<name>" and "adam_v/<name>"; the entry "meta" is a
# UTF-8 JSON document with keys format, version, epoch, best_val, adam_t,
# seed, model_config, train_config, history and extra.

def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "epoch": ckpt.epoch, "best_val": ckpt.best_val, "adam_t": ckpt.adam_t,
            "seed": ckpt.seed, "model_config": ckpt.model_config,
            "train_config": ckpt.train_config, "history": ckpt.history, "extra": ckpt.extra}
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for prefix, d in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in d.items():
            arrays[f"{prefix}/{name}"] = arr
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an adapformer checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key in z.files:
            if "/" in key:
                prefix, name = key.split("/", 1)
                groups[prefix][name] = z[key].copy()
    return Checkpoint(params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
                      adam_t=meta["adam_t"], epoch=meta["epoch"], best_val=meta["best_val"],
                      model_config=meta["model_config"], train_config=meta["train_config"],
                      seed=meta["seed"], history=meta.get("history", []), extra=meta.get("extra", {}))


# ---------------------------------------------------------------- multi-seed runs

@dataclass
class SeedRun:
    seed: int
    report: EvalReport
    epochs: int


@dataclass
class SeedSummary:
    seeds: list
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float
    runs: list


def train_and_evaluate(model_cfg: ModelConfig, train_cfg: TrainConfig, train, val, test,
                       standardizer=None, dataset: str = "") -> tuple[Adapformer, FitResult, EvalReport]:
    model = Adapformer(model_cfg, seed=train_cfg.seed)
    result = fit(model, train, val, train_cfg)
    pred = model.predict(test[0])
    rep = report(pred, test[1], standardizer, dataset=dataset, seed=train_cfg.seed)
    return model, result, rep


def run_seeds(model_cfg: ModelConfig, train_cfg: TrainConfig, train, val, test, seeds,
              standardizer=None, dataset: str = "") -> SeedSummary:
    """Repeat training over seeds; population mean/std of test MSE and MAE."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("run_seeds needs at least two seeds")
    runs = []
    for s in seeds:
        cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": s})
        _, res, rep = train_and_evaluate(model_cfg, cfg, train, val, test, standardizer, dataset)
        runs.append(SeedRun(seed=s, report=rep, epochs=len(res.history)))
    # statistics works in exact arithmetic, so identical runs give std 0 exactly
    m = [r.report.mse for r in runs]
    a = [r.report.mae for r in runs]
    return SeedSummary(seeds=seeds, mse_mean=statistics.fmean(m), mse_std=statistics.pstdev(m),
                       mae_mean=statistics.fmean(a), mae_std=statistics.pstdev(a), runs=runs)
