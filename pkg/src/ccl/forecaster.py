"""Reference forecaster, CV-RMSE, fine-tuning and evaluation protocols."""

from __future__ import annotations

import copy
import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .series import Normalizer, WindowSample, fit_normalizer

log = logging.getLogger(__name__)

ASHRAE_THRESHOLD = 0.3


class ForecasterError(ValueError):
    pass


class ZeroMeanTargetError(ForecasterError):
    def __init__(self):
        super().__init__("zero mean target: CV-RMSE is undefined")


class FrozenModelError(ForecasterError):
    pass


def cv_rmse(y, y_hat) -> float:
    """RMSE of ``y_hat`` against ``y`` divided by the mean of ``y``.

    Raises :class:`ZeroMeanTargetError` when the target mean is zero. The
    absolute value of the mean is used so the score stays nonnegative.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ForecasterError(f"cv_rmse needs equal nonempty lengths, got {y.shape} and {y_hat.shape}")
    mean = float(np.mean(y))
    if abs(mean) <= 1e-12 * max(float(np.max(np.abs(y))), 1e-300):
        raise ZeroMeanTargetError()
    rmse = math.sqrt(float(np.mean((y - y_hat) ** 2)))
    return rmse / abs(mean)


class Protocol(str, enum.Enum):
    ZERO_SHOT = "zero-shot"
    FEW_SHOT = "few-shot"


def _check_input(x, L):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != L:
        raise ForecasterError(f"expected look-back of length {L}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ForecasterError("look-back contains non-finite values")
    return x


class _Forecaster:
    """Shared horizon handling.

    Subclasses produce ``native_horizon`` steps per call through
    ``_predict_native``; longer horizons are rolled out autoregressively
    and shorter ones truncated.
    """

    input_length: int
    native_horizon: int
    horizon: int
    frozen: bool = False
    trainable: bool = False

    def _predict_native(self, X):
        raise NotImplementedError

    def predict_batch(self, X) -> np.ndarray:
        X = _check_input(np.atleast_2d(X), self.input_length)
        out = []
        produced = 0
        context = X
        while produced < self.horizon:
            block = self._predict_native(context[:, -self.input_length:])
            out.append(block)
            produced += block.shape[1]
            context = np.concatenate([context, block], axis=1)
        return np.concatenate(out, axis=1)[:, :self.horizon]

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ForecasterError("predict takes one look-back vector; use predict_batch")
        return self.predict_batch(x[None])[0]

    def with_horizon(self, new_T: int):
        if int(new_T) != new_T or new_T < 1:
            raise ForecasterError(f"horizon must be a positive integer, got {new_T!r}")
        other = copy.copy(self)
        other.horizon = int(new_T)
        return other

    @property
    def L(self):
        return self.input_length

    @property
    def T(self):
        return self.horizon


def resize_horizon(model, new_T: int):
    """Copy of ``model`` that emits ``new_T`` steps per forecast."""
    return model.with_horizon(new_T)


class SeasonalNaive(_Forecaster):
    """Repeats the last ``season`` values of the look-back."""

    trainable = False

    def __init__(self, input_length: int = 96, horizon: int = 24, season: int = 24):
        if season > input_length:
            raise ForecasterError("season longer than the look-back window")
        self.input_length = input_length
        self.native_horizon = horizon
        self.horizon = horizon
        self.season = season
        self.frozen = True

    def _predict_native(self, X):
        L, s = self.input_length, self.season
        idx = L - s + (np.arange(self.native_horizon) % s)
        return X[:, idx]

    def snapshot(self):
        return copy.copy(self)

    thaw = snapshot

    def state(self):
        return {}

    def describe(self):
        return {"kind": "seasonal_naive", "input_length": self.input_length,
                "horizon": self.native_horizon, "season": self.season}


class TCNForecaster(_Forecaster):
    """Dilated causal conv trunk with a linear head and a linear skip.

    The look-back is scaled (per window by default), passed through a residual
    TCN; the head reads the trunk features over the last ``head_window``
    positions, and a linear skip maps the scaled look-back directly to the
    horizon. Outputs are mapped back to the original scale.
    """

    trainable = True

    def __init__(self, input_length: int = 96, horizon: int = 24, channels: int = 32,
                 dilations=(1, 2, 4), kernel_size: int = 3, head_window: int = 24,
                 scaling: str = "instance", seed: int = 0,
                 normalizer: Optional[Normalizer] = None):
        if scaling not in ("instance", "global", "none"):
            raise ForecasterError(f"unknown scaling {scaling!r}")
        if head_window > input_length:
            raise ForecasterError("head_window longer than the look-back window")
        self.input_length = input_length
        self.native_horizon = horizon
        self.horizon = horizon
        self.channels = channels
        self.dilations = tuple(dilations)
        self.kernel_size = kernel_size
        self.head_window = head_window
        self.scaling = scaling
        self.seed = seed
        self.normalizer = normalizer or Normalizer(0.0, 1.0)
        self.frozen = False

        rng = np.random.default_rng(seed)
        self.trunk = dm.TemporalConvStack(1, channels, dilations, kernel_size, rng, prefix="trunk")
        n_feat = channels * head_window
        self.head_w = dm.Parameter("head.w", rng.normal(0.0, 0.1 / np.sqrt(n_feat), (horizon, n_feat)))
        self.head_b = dm.Parameter("head.b", np.zeros(horizon))
        self.skip_w = dm.Parameter("skip.w", np.zeros((horizon, input_length)))

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[dm.Parameter]:
        return list(self.trunk.params.values()) + [self.head_w, self.head_b, self.skip_w]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state) -> None:
        for p in self.parameters():
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ForecasterError(f"{p.name}: shape {value.shape} != {p.value.shape}")
            p.value = value.copy()

    def describe(self):
        return {"kind": "tcn", "input_length": self.input_length,
                "horizon": self.native_horizon, "channels": self.channels,
                "dilations": list(self.dilations), "kernel_size": self.kernel_size,
                "head_window": self.head_window, "scaling": self.scaling,
                "seed": self.seed,
                "normalizer": [self.normalizer.mean, self.normalizer.std]}

    def snapshot(self) -> "TCNForecaster":
        """Frozen deep copy, used as the pre-trained reference."""
        other = copy.deepcopy(self)
        other.frozen = True
        return other

    def thaw(self) -> "TCNForecaster":
        """Trainable deep copy with fresh optimizer moments."""
        other = copy.deepcopy(self)
        other.frozen = False
        for p in other.parameters():
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
            p.grad = np.zeros_like(p.value)
        return other

    # -- forward / backward -----------------------------------------------

    def _scale(self, X):
        if self.scaling == "instance":
            mu = X.mean(axis=1, keepdims=True)
            sd = X.std(axis=1, keepdims=True)
            sd = np.where(sd > 1e-8, sd, 1.0)
        elif self.scaling == "global":
            mu = np.full((X.shape[0], 1), self.normalizer.mean)
            sd = np.full((X.shape[0], 1), self.normalizer.std)
        else:
            mu = np.zeros((X.shape[0], 1))
            sd = np.ones((X.shape[0], 1))
        return mu, sd

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel_size - 1) * sum(self.dilations)

    def _forward(self, Xn):
        # head positions only see the last (receptive field - 1) inputs before
        # them, so the trunk runs on that suffix; outputs are unchanged
        span = min(self.input_length, self.head_window + self.receptive_field - 1)
        h, trunk_cache = self.trunk.forward(Xn[:, None, -span:])
        feats = h[:, :, -self.head_window:].reshape(Xn.shape[0], -1)
        out = (dm.dense_forward(feats, self.head_w.value, self.head_b.value)
               + Xn @ self.skip_w.value.T)
        return dm.check_finite(out, "forecaster output"), (Xn, h.shape, trunk_cache, feats)

    def _backward(self, dout, cache):
        Xn, h_shape, trunk_cache, feats = cache
        dfeats, dW, db = dm.dense_backward(dout, feats, self.head_w.value)
        self.head_w.grad += dW
        self.head_b.grad += db
        self.skip_w.grad += dout.T @ Xn
        dh = np.zeros(h_shape)
        dh[:, :, -self.head_window:] = dfeats.reshape(h_shape[0], h_shape[1], self.head_window)
        self.trunk.backward(dh, trunk_cache)

    def _predict_native(self, X):
        mu, sd = self._scale(X)
        out, _ = self._forward((X - mu) / sd)
        return out * sd + mu

    def loss_and_grad(self, X, Y) -> float:
        """MSE in scaled units; gradients accumulate into the parameters."""
        mu, sd = self._scale(X)
        Xn = (X - mu) / sd
        Yn = (Y - mu) / sd
        out, cache = self._forward(Xn)
        loss = dm.mse_forward(out, Yn)
        self._backward(dm.mse_backward(out, Yn), cache)
        return loss

    def loss(self, X, Y) -> float:
        mu, sd = self._scale(X)
        out, _ = self._forward((X - mu) / sd)
        return dm.mse_forward(out, (Y - mu) / sd)

    def save(self, path) -> None:
        dm.save_params(self.state(), path, meta=self.describe())


def save_forecaster(model, path) -> None:
    dm.save_params(model.state(), path, meta=model.describe())


def load_forecaster(path):
    params, meta = dm.load_params(path)
    kind = meta.get("kind")
    if kind == "seasonal_naive":
        return SeasonalNaive(meta["input_length"], meta["horizon"], meta["season"])
    if kind != "tcn":
        raise ForecasterError(f"{path}: unknown model kind {kind!r}")
    mean, std = meta.get("normalizer", [0.0, 1.0])
    model = TCNForecaster(meta["input_length"], meta["horizon"], meta["channels"],
                          meta["dilations"], meta["kernel_size"], meta["head_window"],
                          meta["scaling"], meta["seed"], Normalizer(mean, std))
    model.load_state(params)
    return model.snapshot()


# ---------------------------------------------------------------------------
# training

def samples_to_arrays(samples: Sequence[WindowSample], horizon: int):
    X = np.stack([s.x for s in samples])
    try:
        Y = np.stack([s.y[:horizon] for s in samples])
    except ValueError:
        raise ForecasterError("samples have inconsistent lengths") from None
    if Y.shape[1] != horizon:
        raise ForecasterError(f"sample targets shorter than the model horizon {horizon}")
    return X, Y


@dataclass
class TrainConfig:
    """Optimizer settings for forecaster training.

    ``lr_schedule`` is ``"constant"`` or ``"linear"`` (decay to zero over the
    full step budget).
    """

    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant" or total <= 0:
            return self.lr
        if self.lr_schedule == "linear":
            return self.lr * (1.0 - step / total)
        raise ForecasterError(f"unknown lr schedule {self.lr_schedule!r}")


def train_on_pools(model: TCNForecaster, X, Y, pools, steps_per_pool, train: TrainConfig,
                   seed: int) -> list[float]:
    """Run ``steps_per_pool[i]`` Adam steps with batches drawn from ``pools[i]``.

    Batches are drawn uniformly with replacement from the pool. The random
    stream and the Adam step counter run continuously across pools, so one
    pool of ``n`` steps and several identical pools summing to ``n`` steps
    give bit-identical parameters. Returns the mean batch loss per pool.
    """
    if model.frozen:
        raise FrozenModelError("cannot train a frozen model; call thaw() first")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = dm.Adam(train.lr, train.beta1, train.beta2, train.eps)
    total = int(sum(steps_per_pool))
    step = 0
    losses = []
    for pool, n_steps in zip(pools, steps_per_pool):
        pool = np.asarray(pool)
        batch_losses = []
        for _ in range(n_steps):
            idx = pool[rng.integers(0, pool.size, size=train.batch_size)]
            for p in params:
                p.zero_grad()
            batch_losses.append(model.loss_and_grad(X[idx], Y[idx]))
            opt.step(params, lr=train.lr_at(step, total))
            step += 1
        losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
    return losses


def finetune(model: TCNForecaster, samples: Sequence[WindowSample], steps: int,
             train: Optional[TrainConfig] = None, seed: int = 0) -> TCNForecaster:
    """Return a fine-tuned copy of ``model``; the original is left untouched."""
    if not getattr(model, "trainable", False):
        raise ForecasterError(f"{type(model).__name__} has no trainable parameters")
    if model.frozen:
        raise FrozenModelError("cannot fine-tune a frozen model; call thaw() first")
    if len(samples) == 0:
        raise ForecasterError("fine-tuning set is empty")
    train = train or TrainConfig()
    tuned = model.thaw()
    if steps > 0:
        X, Y = samples_to_arrays(samples, model.native_horizon)
        train_on_pools(tuned, X, Y, [np.arange(len(samples))], [steps], train, seed)
    return tuned


@dataclass
class PretrainConfig:
    steps: int = 3000
    seed: int = 0
    channels: int = 32
    dilations: tuple = (1, 2, 4)
    kernel_size: int = 3
    head_window: int = 24
    scaling: str = "instance"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-3))


def pretrain(samples: Sequence[WindowSample], L: int, T: int,
             config: Optional[PretrainConfig] = None) -> TCNForecaster:
    """Train a reference forecaster from scratch and return a frozen snapshot."""
    config = config or PretrainConfig()
    if not samples:
        raise ForecasterError("pre-training corpus is empty")
    normalizer = fit_normalizer(samples) if config.scaling == "global" else None
    model = TCNForecaster(L, T, config.channels, config.dilations, config.kernel_size,
                          config.head_window, config.scaling, config.seed, normalizer)
    X, Y = samples_to_arrays(samples, T)
    losses = train_on_pools(model, X, Y, [np.arange(len(samples))], [config.steps],
                            config.train, config.seed)
    log.info("pretrained on %d windows, %d steps, final mean loss %.4f",
             len(samples), config.steps, losses[-1] if losses else float("nan"))
    return model.snapshot()


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class FewShotConfig:
    fraction: float = 0.1
    steps: int = 50
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8, lr=5e-4))


def few_shot_split(windows: Sequence[WindowSample], fraction: float = 0.1):
    """Chronological split: the earliest ``floor(fraction * n)`` windows train."""
    ordered = sorted(windows, key=lambda w: w.t0)
    n_train = max(1, int(math.floor(fraction * len(ordered) + 1e-9)))
    if n_train >= len(ordered):
        raise ForecasterError("few-shot split leaves no test windows")
    return ordered[:n_train], ordered[n_train:]


@dataclass
class EvalReport:
    scores: list
    sample_keys: list
    horizon: int
    protocol: Protocol
    n_train: int = 0
    n_excluded: int = 0

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.scores))

    @property
    def ashrae_pass(self) -> bool:
        return self.aggregate < ASHRAE_THRESHOLD

    def to_dict(self):
        return {"protocol": Protocol(self.protocol).value, "horizon": self.horizon,
                "aggregate": self.aggregate, "ashrae_pass": self.ashrae_pass,
                "n_samples": len(self.scores), "n_train": self.n_train,
                "n_excluded": self.n_excluded,
                "samples": [{"key": k, "cv_rmse": s}
                            for k, s in zip(self.sample_keys, self.scores)]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "protocol", "horizon", "cv_rmse"])
            for k, s in zip(self.sample_keys, self.scores):
                writer.writerow([k, Protocol(self.protocol).value, self.horizon, repr(s)])


def score_windows(model, windows: Sequence[WindowSample]):
    """Per-window CV-RMSE; windows with a zero-mean target are skipped."""
    if not windows:
        return [], [], 0
    X = np.stack([w.x for w in windows])
    preds = model.predict_batch(X)
    scores, keys, excluded = [], [], 0
    for w, p in zip(windows, preds):
        try:
            scores.append(cv_rmse(w.y, p))
            keys.append(w.key)
        except ZeroMeanTargetError:
            excluded += 1
    return scores, keys, excluded


def evaluate(model, test_windows: Sequence[WindowSample], protocol=Protocol.ZERO_SHOT,
             few_shot: Optional[FewShotConfig] = None) -> EvalReport:
    """Score ``model`` on one target's windows under a protocol.

    Zero-shot scores every window with the model as given. Few-shot first
    fine-tunes a copy on the chronologically earliest 10% of windows (targets
    cut to the model's native horizon) and scores the remaining 90%.
    """
    protocol = Protocol(protocol)
    if not test_windows:
        raise ForecasterError("test set is empty")
    T = test_windows[0].T
    if any(w.T != T or w.L != model.input_length for w in test_windows):
        raise ForecasterError("test windows do not share the model's look-back and horizon")
    if model.horizon != T:
        model = resize_horizon(model, T)

    n_train = 0
    if protocol is Protocol.FEW_SHOT:
        few_shot = few_shot or FewShotConfig()
        train_w, test_windows = few_shot_split(test_windows, few_shot.fraction)
        n_train = len(train_w)
        if getattr(model, "trainable", False):
            native = [w.truncated(model.native_horizon) if w.T >= model.native_horizon else w
                      for w in train_w]
            model = finetune(model.thaw(), native, few_shot.steps, few_shot.train, few_shot.seed)

    scores, keys, excluded = score_windows(model, test_windows)
    if not scores:
        raise ForecasterError("every test window has a zero-mean target")
    if excluded:
        log.warning("excluded %d test window(s) with zero-mean targets", excluded)
    return EvalReport(scores, keys, T, protocol, n_train, excluded)
