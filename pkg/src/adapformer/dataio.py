"""CSV loading, chronological splits, train-only standardization, windows."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass
class RawSeries:
    values: np.ndarray  # (T_total, N)
    columns: list[str]
    timestamps: list[str] | None = None
    freq: str = ""

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, freq: str = "") -> RawSeries:
    """Read a header-first CSV of floats.

    A first column whose first data cell is not numeric is taken to be a
    timestamp column and kept as labels. Missing or non-finite cells are
    rejected with their position.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"{path}: need a header row and at least one data row")
    header, body = rows[0], rows[1:]
    has_time = not _is_number(body[0][0].strip())
    start = 1 if has_time else 0
    columns = [h.strip() for h in header[start:]]
    if not columns:
        raise DataError(f"{path}: no value columns")

    values = np.empty((len(body), len(header) - start))
    stamps = [] if has_time else None
    for i, row in enumerate(body):
        line = i + 2  # 1-based, header is line 1
        if len(row) != len(header):
            raise DataError(f"{path}: line {line} has {len(row)} cells, expected {len(header)}")
        if has_time:
            stamps.append(row[0])
        for j, cell in enumerate(row[start:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: unparseable cell {cell!r} at line {line}, column {columns[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell {cell!r} at line {line}, column {columns[j]!r}")
            values[i, j] = v
    return RawSeries(values=values, columns=columns, timestamps=stamps, freq=freq)


def save_csv(path, values: np.ndarray, columns, timestamps=None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if timestamps is not None else []) + list(columns))
        for i, row in enumerate(values):
            lead = [timestamps[i]] if timestamps is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        for name in ("train", "val", "test"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise ValueError(f"split ratio {name}={r} must lie in (0, 1)")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


def split_chronological(n_rows: int, spec: SplitSpec = SplitSpec()) -> tuple[range, range, range]:
    """Contiguous train/val/test row ranges.

    Validation and test sizes are floored (never below one row); the
    training split takes the remainder.
    """
    if isinstance(n_rows, RawSeries):
        n_rows = n_rows.n_rows
    if n_rows < 3:
        raise ValueError(f"need at least 3 rows to split, got {n_rows}")
    n_val = max(1, math.floor(n_rows * spec.val + 1e-9))
    n_test = max(1, math.floor(n_rows * spec.test + 1e-9))
    n_train = n_rows - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_rows} rows leave no training data")
    return (range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n_rows))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean


def fit_standardizer(values, train: range, eps: float = STD_FLOOR) -> Standardizer:
    """Per-channel mean and population std from the training rows only."""
    if len(train) == 0:
        raise ValueError("empty training range")
    block = np.asarray(values[train.start:train.stop])
    mu = block.mean(axis=0)
    sd = np.maximum(block.std(axis=0), eps)
    return Standardizer(mean=mu, std=sd)


def standardize(series: RawSeries, train: range) -> tuple[Standardizer, RawSeries]:
    st = fit_standardizer(series.values, train)
    out = RawSeries(values=st.apply(series.values), columns=list(series.columns),
                    timestamps=series.timestamps, freq=series.freq)
    return st, out


@dataclass(frozen=True)
class WindowPair:
    X: np.ndarray = field(repr=False)  # (T, N)
    Y: np.ndarray = field(repr=False)  # (L, N)

    def __post_init__(self):
        self.X.setflags(write=False)
        self.Y.setflags(write=False)


def window_count(length: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if length < lookback + horizon:
        return 0
    return (length - lookback - horizon) // stride + 1


def window_starts(rows: range, lookback: int, horizon: int, stride: int = 1) -> np.ndarray:
    n = window_count(len(rows), lookback, horizon, stride)
    if n == 0:
        warnings.warn(
            f"range of {len(rows)} rows is shorter than lookback+horizon={lookback + horizon}; no windows",
            stacklevel=3,
        )
    return rows.start + stride * np.arange(n)


def make_windows(values, rows: range, lookback: int, horizon: int, stride: int = 1) -> list[WindowPair]:
    """Windows lying entirely inside ``rows``; Y starts right after X ends."""
    values = np.asarray(values)
    out = []
    for s in window_starts(rows, lookback, horizon, stride):
        out.append(WindowPair(X=values[s:s + lookback].copy(),
                              Y=values[s + lookback:s + lookback + horizon].copy()))
    return out


def window_arrays(values, rows: range, lookback: int, horizon: int, stride: int = 1):
    """Stacked (X, Y) arrays of shape (W, T, N) and (W, L, N)."""
    values = np.asarray(values)
    starts = window_starts(rows, lookback, horizon, stride)
    n = values.shape[1]
    if len(starts) == 0:
        return np.empty((0, lookback, n)), np.empty((0, horizon, n))
    ix = starts[:, None] + np.arange(lookback)[None, :]
    iy = starts[:, None] + lookback + np.arange(horizon)[None, :]
    return values[ix], values[iy]


@dataclass
class PreparedData:
    """A standardized series with its splits and windowed arrays."""
    series: RawSeries          # standardized values
    standardizer: Standardizer
    splits: tuple              # (train, val, test) row ranges
    train: tuple               # (X, Y) arrays
    val: tuple
    test: tuple


def prepare(series: RawSeries, lookback: int, horizon: int,
            spec: SplitSpec = SplitSpec(), standardizer: Standardizer | None = None) -> PreparedData:
    """Split chronologically, standardize on train rows, window each split."""
    splits = split_chronological(series.n_rows, spec)
    if standardizer is None:
        standardizer = fit_standardizer(series.values, splits[0])
    z = RawSeries(values=standardizer.apply(series.values), columns=list(series.columns),
                  timestamps=series.timestamps, freq=series.freq)
    arrays = [window_arrays(z.values, r, lookback, horizon) for r in splits]
    return PreparedData(series=z, standardizer=standardizer, splits=splits,
                        train=arrays[0], val=arrays[1], test=arrays[2])
