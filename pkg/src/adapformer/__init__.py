"""Adapformer: channel-adaptive Transformer forecasting on a small numpy autodiff core."""
from .dataio import (DataError, RawSeries, SplitSpec, Standardizer, load_csv, prepare,
                     split_chronological, window_arrays)
from .encoder import ModelConfig
from .metrics import EvalReport, mae, mse, r2, report
from .model import Adapformer
from .training import (Checkpoint, NumericalError, TrainConfig, fit, load_checkpoint,
                       run_seeds, save_checkpoint, train_and_evaluate)

__all__ = [
    "Adapformer", "Checkpoint", "DataError", "EvalReport", "ModelConfig", "NumericalError",
    "RawSeries", "SplitSpec", "Standardizer", "TrainConfig", "fit", "load_checkpoint", "load_csv",
    "mae", "mse", "prepare", "r2", "report", "run_seeds", "save_checkpoint",
    "split_chronological", "train_and_evaluate", "window_arrays",
]
__version__ = "0.1.0"
