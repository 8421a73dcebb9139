"""Univariate load series, rolling windows, normalization and synthetic buildings."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd


class SeriesError(ValueError):
    """Base class for ingestion and windowing errors."""


class MissingColumnError(SeriesError, KeyError):
    def __init__(self, path, column):
        super().__init__(f"{path}: column {column!r} not found")
        self.path = path
        self.column = column

    def __str__(self):
        return self.args[0]


class EmptySeriesError(SeriesError):
    def __init__(self, path):
        super().__init__(f"{path}: zero parseable rows")
        self.path = path


class Origin(str, enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"


@dataclass
class TimeSeries:
    """A single building's load stream.

    Attributes:
        id: identifier, unique within a corpus.
        values: load values in time order (float64, all finite).
        interval: sampling period in minutes; metadata only.
        tags: free-form metadata, e.g. generator parameters or ``origin``.
    """

    id: str
    values: np.ndarray
    interval: int = 60
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size == 0:
            raise SeriesError(f"series {self.id!r} is empty")
        if not np.all(np.isfinite(self.values)):
            raise SeriesError(f"series {self.id!r} contains non-finite values")

    def __len__(self):
        return self.values.size

    @property
    def origin(self) -> Origin:
        return Origin(self.tags.get("origin", Origin.REAL.value))


@dataclass(frozen=True, eq=False)
class WindowSample:
    """One rolling-window sample: look-back ``x`` followed by target ``y``."""

    series_id: str
    t0: int
    x: np.ndarray
    y: np.ndarray
    origin: Origin = Origin.REAL

    @property
    def L(self) -> int:
        return self.x.size

    @property
    def T(self) -> int:
        return self.y.size

    @property
    def key(self) -> str:
        return f"{self.series_id}@{self.t0}"

    def concat(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    def truncated(self, T: int) -> "WindowSample":
        """Same window with the target cut to its first ``T`` values."""
        if T > self.T:
            raise SeriesError(f"cannot truncate target of length {self.T} to {T}")
        return WindowSample(self.series_id, self.t0, self.x, self.y[:T], self.origin)


def load_csv(path, value_column: str, id: Optional[str] = None,
             interval: int = 60, policy: str = "interpolate") -> TimeSeries:
    """Read one value column of a CSV file into a :class:`TimeSeries`.

    Missing or non-numeric entries are linearly interpolated when they sit
    between two valid readings. Leading and trailing gaps are trimmed. With
    ``policy="drop"`` every missing row is removed instead.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no such file")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise EmptySeriesError(path) from None
    if value_column not in frame.columns:
        raise MissingColumnError(path, value_column)

    values = pd.to_numeric(frame[value_column], errors="coerce").astype(np.float64)
    values = values.where(np.isfinite(values))
    if policy == "interpolate":
        values = values.interpolate(method="linear", limit_area="inside")
    elif policy != "drop":
        raise ValueError(f"unknown missing-value policy {policy!r}")
    values = values.dropna()
    if values.empty:
        raise EmptySeriesError(path)

    series_id = id if id is not None else os.path.splitext(os.path.basename(path))[0]
    return TimeSeries(series_id, values.to_numpy(), interval=interval,
                      tags={"source": path, "origin": Origin.REAL.value})


def write_csv(series: TimeSeries, path, value_column: str = "value") -> None:
    """Write ``series`` in the shape :func:`load_csv` reads back."""
    stamps = pd.date_range("2020-01-01", periods=len(series), freq=f"{series.interval}min")
    frame = pd.DataFrame({"timestamp": stamps.strftime("%Y-%m-%dT%H:%M:%S"),
                          value_column: series.values})
    # repr-precision floats so the round trip is exact
    frame.to_csv(path, index=False, float_format="%.17g")


def window_count(N: int, L: int, T: int, stride: int) -> int:
    return (N - L - T) // stride + 1 if N >= L + T else 0


def rolling_windows(series: TimeSeries, L: int, T: int, stride: int = 1,
                    origin: Optional[Origin] = None) -> list[WindowSample]:
    """Cut ``series`` into windows of ``L`` look-back and ``T`` target steps.

    Windows start at 0, stride, 2*stride, ... and stop once the window would
    run past the end of the series.
    """
    for name, value in (("L", L), ("T", T), ("stride", stride)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    origin = Origin(origin) if origin is not None else series.origin
    values = series.values
    out = []
    for start in range(0, window_count(len(values), L, T, stride) * stride, stride):
        chunk = values[start:start + L + T]
        out.append(WindowSample(series.id, start, chunk[:L].copy(), chunk[L:].copy(), origin))
    return out


@dataclass(frozen=True)
class Normalizer:
    """Z-score transform with statistics taken from training look-backs."""

    mean: float
    std: float

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def apply_sample(self, sample: WindowSample) -> WindowSample:
        return WindowSample(sample.series_id, sample.t0, self.apply(sample.x),
                            self.apply(sample.y), sample.origin)


def fit_normalizer(train_windows: Sequence[WindowSample]) -> Normalizer:
    if len(train_windows) == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    xs = np.concatenate([w.x for w in train_windows])
    mean = float(xs.mean())
    std = float(xs.std())
    if std == 0.0 or not math.isfinite(std):
        std = 1.0
    return Normalizer(mean, std)


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of one synthetic hourly building.

    ``regime_shift_scale`` is the largest load drop of a reduced-load day;
    ``origin`` tags the generated series.
    """

    n_days: int = 60
    daily_amplitude: float = 1.0
    weekly_amplitude: float = 0.0
    base_load: float = 10.0
    noise_sigma: float = 0.0
    regime_shift_prob: float = 0.0
    seed: int = 0
    regime_shift_scale: float = 1.0
    origin: str = Origin.REAL.value

    def validate(self) -> None:
        if int(self.n_days) != self.n_days or self.n_days < 1:
            raise ValueError(f"n_days must be a positive integer, got {self.n_days!r}")
        if not self.base_load > 0:
            raise ValueError(f"base_load must be > 0, got {self.base_load!r}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if not 0.0 <= self.regime_shift_prob <= 1.0:
            raise ValueError(f"regime_shift_prob must lie in [0, 1], got {self.regime_shift_prob!r}")
        if not self.regime_shift_scale >= 0:
            raise ValueError(f"regime_shift_scale must be >= 0, got {self.regime_shift_scale!r}")
        Origin(self.origin)


def generate_synthetic(config: GeneratorConfig, id: Optional[str] = None) -> TimeSeries:
    """Hourly load: base + daily and weekly sinusoids + regime offsets + noise.

    Regime offsets are piecewise constant by day: each day independently,
    with probability ``regime_shift_prob``, runs in a reduced-load regime
    (holiday, partial shutdown) whose offset is ``-regime_shift_scale * U``
    with ``U ~ Uniform(0.5, 1)``. Other days carry no offset.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = 24 * config.n_days
    t = np.arange(n, dtype=np.float64)

    shifted = rng.random(config.n_days) < config.regime_shift_prob
    depth = rng.uniform(0.5, 1.0, config.n_days) * config.regime_shift_scale
    daily_offset = np.where(shifted, -depth, 0.0)
    noise = rng.normal(0.0, 1.0, n) * config.noise_sigma

    values = (config.base_load
              + config.daily_amplitude * np.sin(2 * np.pi * t / 24)
              + config.weekly_amplitude * np.sin(2 * np.pi * t / 168)
              + np.repeat(daily_offset, 24)
              + noise)
    tags = asdict(config)
    series_id = id if id is not None else f"{config.origin}-{config.seed}"
    return TimeSeries(series_id, values, interval=60, tags=tags)
