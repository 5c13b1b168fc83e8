"""Point-forecast metrics and the evaluation report record."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _pair(pred, true):
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {true.shape}")
    return pred, true


def mse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.mean((pred - true) ** 2))


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.mean(np.abs(pred - true)))


def r2(pred, true) -> float:
    """1 - SS_res / SS_tot, with SS_tot about the global mean of ``true``."""
    pred, true = _pair(pred, true)
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 is undefined for a target with zero variance")
    return 1.0 - float(np.sum((pred - true) ** 2)) / ss_tot


@dataclass
class EvalReport:
    mse: float
    mae: float
    r2: float
    mse_raw: float
    mae_raw: float
    n_samples: int
    horizon: int
    dataset: str = ""
    seed: int | None = None

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kinds = {f.name: f.type for f in fields(cls)}
        raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        out = {}
        for k, v in raw.items():
            if k not in kinds:
                continue
            if k == "dataset":
                out[k] = v
            elif k in ("n_samples", "horizon", "seed"):
                out[k] = int(v) if v != "" else None
            else:
                out[k] = float(v)
        return cls(**out)


def report(pred, true, standardizer=None, dataset: str = "", seed=None) -> EvalReport:
    """Metrics on the standardized scale plus the original units.

    ``pred`` and ``true`` are (W, L, N) on the standardized scale; with no
    standardizer the raw metrics equal the standardized ones.
    """
    pred, true = _pair(pred, true)
    if standardizer is not None:
        pred_raw, true_raw = standardizer.inverse(pred), standardizer.inverse(true)
    else:
        pred_raw, true_raw = pred, true
    try:
        r2v = r2(pred, true)
    except UndefinedMetricError:
        r2v = float("nan")
    return EvalReport(mse=mse(pred, true), mae=mae(pred, true), r2=r2v,
                      mse_raw=mse(pred_raw, true_raw), mae_raw=mae(pred_raw, true_raw),
                      n_samples=int(pred.shape[0]), horizon=int(pred.shape[1]) if pred.ndim > 1 else 1,
                      dataset=dataset, seed=seed)
