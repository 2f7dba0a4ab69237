"""Datasets: the 1-D heteroscedastic toy problem and CSV time series.

Time-series pipeline: load -> fit min-max scaler on the rows the training
windows touch -> scale -> sliding windows -> chronological 60/20/20 split.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

X_RANGE = (-30.0, 40.0)
NOISE_REGION = (10.0, 20.0)
NOISE_COEF = 0.0225
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class SyntheticData:
    x: np.ndarray
    y: np.ndarray
    clean_y: np.ndarray
    noise_variance: np.ndarray

    def __len__(self) -> int:
        return self.x.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "clean_y", "true_noise_variance"])
            for row in zip(self.x, self.y, self.clean_y, self.noise_variance):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "SyntheticData":
        series = load_csv(path, "y")
        cols = {name: series.values[:, j] for j, name in enumerate(series.columns)}
        missing = {"x", "y", "clean_y", "true_noise_variance"} - set(cols)
        if missing:
            raise SchemaError(f"{path}: synthetic dump lacks columns {sorted(missing)}")
        return cls(cols["x"], cols["y"], cols["clean_y"], cols["true_noise_variance"])


def clean_function(x):
    """0.4x sin(x) + 0.7x cos(x/2)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.4 * x * np.sin(x) + 0.7 * x * np.cos(x / 2.0)


def noise_variance(x, region=NOISE_REGION):
    """0.0225 x^2 inside ``region`` (closed), zero outside; ``region=None`` applies it everywhere."""
    x = np.asarray(x, dtype=np.float64)
    var = NOISE_COEF * x * x
    if region is None:
        return var
    lo, hi = region
    return np.where((x >= lo) & (x <= hi), var, 0.0)


def gen_synthetic(n: int = 1000, seed: int = 0, region=NOISE_REGION) -> SyntheticData:
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(*X_RANGE, size=n)
    eps = rng.standard_normal(n)
    clean = clean_function(x)
    var = noise_variance(x, region)
    return SyntheticData(x, clean + np.sqrt(var) * eps, clean, var)


@dataclass
class TimeSeries:
    """An ``(L, D)`` matrix of observations in file order."""

    values: np.ndarray
    columns: list
    target: str
    interval: str = ""

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def target_index(self) -> int:
        return self.columns.index(self.target)


def load_csv(path, target_column: str, fill: str = "reject", interval: str = "") -> TimeSeries:
    """Read a header + numeric-cells CSV.

    Empty or NaN cells raise unless ``fill='ffill'``, which carries the last
    observed value forward.
    """
    if fill not in ("reject", "ffill"):
        raise ConfigError(f"fill must be 'reject' or 'ffill', got {fill!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if target_column not in header:
            raise SchemaError(f"{path}: target column {target_column!r} not found; available columns: {header}")
        rows = []
        for r, raw in enumerate(reader, start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise ParseError(f"{path}: row {r} has {len(raw)} cells, header has {len(header)}")
            vals = []
            for name, cell in zip(header, raw):
                text = cell.strip()
                try:
                    v = float(text) if text else math.nan
                except ValueError:
                    raise ParseError(f"{path}: non-numeric value {cell!r} at row {r}, column {name!r}") from None
                if math.isinf(v):
                    raise ParseError(f"{path}: infinite value at row {r}, column {name!r}")
                if math.isnan(v):
                    if fill == "reject":
                        raise ParseError(f"{path}: missing value at row {r}, column {name!r}")
                    if not rows:
                        raise ParseError(f"{path}: missing value at row {r}, column {name!r} with nothing to carry forward")
                    v = rows[-1][len(vals)]
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return TimeSeries(np.array(rows, dtype=np.float64), header, target_column, interval)


@dataclass
class Scaler:
    """Per-column min-max scaler. Constant columns pass through with unit range."""

    min_: np.ndarray
    max_: np.ndarray
    constant: np.ndarray = field(default=None)

    @property
    def range_(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.max_ - self.min_)

    def apply(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.min_) / self.range_

    def invert(self, rows) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.range_ + self.min_

    def apply_column(self, values, column: int) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.min_[column]) / self.range_[column]

    def invert_column(self, values, column: int) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.range_[column] + self.min_[column]

    def invert_variance(self, variance, column: int) -> np.ndarray:
        return np.asarray(variance, dtype=np.float64) * self.range_[column] ** 2


def fit_scaler(train_rows) -> Scaler:
    rows = np.asarray(train_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    constant = hi <= lo
    if constant.any():
        warnings.warn(f"constant columns {np.flatnonzero(constant).tolist()} are passed through unscaled")
    return Scaler(lo, hi, constant)


def apply(scaler: Scaler, rows):
    return scaler.apply(rows)


def invert(scaler: Scaler, rows):
    return scaler.invert(rows)


def invert_variance(scaler: Scaler, variance, column: int):
    return scaler.invert_variance(variance, column)


@dataclass
class WindowedDataset:
    """``inputs`` is ``(N, w, D)``; ``target_rows[i]`` is the source row of ``targets[i]``."""

    inputs: np.ndarray
    targets: np.ndarray
    target_rows: np.ndarray
    input_start: np.ndarray

    def __len__(self) -> int:
        return self.targets.size

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.target_rows[idx], self.input_start[idx])


def window(values, w: int = 5, h: int = 1, target_column: int = 0) -> WindowedDataset:
    """Input i is rows [i, i+w); its target is ``target_column`` at row i+w+h-1."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if w < 1 or h < 1:
        raise ConfigError(f"window and horizon must be >= 1, got w={w}, h={h}")
    L = values.shape[0]
    if L < w + h:
        raise ConfigError(f"series of length {L} is too short for window {w} + horizon {h}")
    n = L - w - h + 1
    starts = np.arange(n)
    inputs = np.stack([values[i:i + w] for i in starts])
    rows = starts + w + h - 1
    return WindowedDataset(inputs, values[rows, target_column].copy(), rows, starts)


def split_sizes(n: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    if n < 5:
        raise ConfigError(f"need at least 5 samples to split, got {n}")
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split(data: WindowedDataset, fractions=DEFAULT_FRACTIONS):
    """Contiguous chronological train/val/test slices."""
    n_train, n_val, _ = split_sizes(len(data), fractions)
    idx = np.arange(len(data))
    return (data.subset(idx[:n_train]), data.subset(idx[n_train:n_train + n_val]),
            data.subset(idx[n_train + n_val:]))


@dataclass
class PreparedData:
    """Scaled train/val/test sets plus what is needed to return to data units."""

    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    scaler: Scaler
    target_index: int
    input_scaler: Scaler | None = None
    extra: dict = field(default_factory=dict)

    def to_units(self, values) -> np.ndarray:
        return self.scaler.invert_column(values, self.target_index)

    def variance_to_units(self, variance) -> np.ndarray:
        return self.scaler.invert_variance(variance, self.target_index)


def prepare_series(series: TimeSeries, w: int = 5, h: int = 1, fractions=DEFAULT_FRACTIONS) -> PreparedData:
    """Scale with training-only statistics, then window and split chronologically."""
    n = series.length - w - h + 1
    if n < 5:
        raise ConfigError(f"series of length {series.length} gives only {max(n, 0)} windows; need 5")
    n_train, _, _ = split_sizes(n, fractions)
    last_train_row = n_train - 1 + w + h - 1
    scaler = fit_scaler(series.values[:last_train_row + 1])
    windows = window(scaler.apply(series.values), w, h, series.target_index)
    train, val, test = split(windows, fractions)
    return PreparedData(train, val, test, scaler, series.target_index)


def prepare_synthetic(data: SyntheticData, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> PreparedData:
    """Random (not chronological) split of the i.i.d. toy points.

    x is standardized and y min-max scaled, both with training statistics.
    """
    n_train, n_val, _ = split_sizes(len(data), fractions)
    perm = np.random.default_rng([seed, 11]).permutation(len(data))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    x_train = data.x[parts[0]]
    mu, sd = x_train.mean(), x_train.std()
    sd = sd if sd > 0 else 1.0
    x_scaler = Scaler(np.array([mu]), np.array([mu + sd]), np.array([False]))
    y_scaler = fit_scaler(data.y[parts[0]])
    xs = x_scaler.apply(data.x[:, None])
    ys = y_scaler.apply_column(data.y, 0)
    sets = []
    for idx in parts:
        idx = np.sort(idx)
        sets.append(WindowedDataset(xs[idx][:, None, :], ys[idx], idx, idx))
    return PreparedData(*sets, scaler=y_scaler, target_index=0, input_scaler=x_scaler,
                        extra={"split": "random"})
