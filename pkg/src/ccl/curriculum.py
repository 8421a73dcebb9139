"""Easy-to-hard scheduling and the curriculum fine-tuning driver."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import contrastive as cl
from .contrastive import DifficultyScore, EncoderConfig, Provenance
from .forecaster import FrozenModelError, TrainConfig, samples_to_arrays, train_on_pools
from .series import WindowSample

log = logging.getLogger(__name__)


class CurriculumError(ValueError):
    pass


def _check_schedule(lambda0, t_grow):
    if not 0.0 < lambda0 <= 1.0:
        raise CurriculumError(f"lambda0 must lie in (0, 1], got {lambda0!r}")
    if not t_grow >= 1:
        raise CurriculumError(f"t_grow must be >= 1, got {t_grow!r}")


def lambda_t(lambda0: float, t_grow: float, t: float) -> float:
    """Fraction of the easiest samples in use at epoch ``t``.

    Grows linearly from ``lambda0`` at epoch 0 to 1 at ``t_grow``, then stays
    at 1.
    """
    _check_schedule(lambda0, t_grow)
    if t < 0:
        raise CurriculumError(f"epoch must be >= 0, got {t!r}")
    if t >= t_grow:
        return 1.0  # exact, since lambda0 + (1 - lambda0) can round below 1
    return min(1.0, lambda0 + (1.0 - lambda0) * t / t_grow)


def subset_size(n: int, lam: float) -> int:
    # n*lam is an index bound; the tolerance stops float noise such as
    # 10*0.3 == 3.0000000000000004 from bumping the size up by one
    return max(1, min(n, math.ceil(n * lam - 1e-9)))


def rank_by_difficulty(scores) -> np.ndarray:
    """Indices ordering ``scores`` from easiest to hardest; ties keep input order."""
    values = np.array([s.value if isinstance(s, DifficultyScore) else float(s) for s in scores],
                      dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise CurriculumError("difficulty scores must be finite")
    return np.argsort(values, kind="stable")


@dataclass
class CurriculumSchedule:
    lambda0: float
    t_grow: int
    total_epochs: int
    order: np.ndarray

    def __post_init__(self):
        _check_schedule(self.lambda0, self.t_grow)
        if self.total_epochs < self.t_grow:
            raise CurriculumError(
                f"total_epochs ({self.total_epochs}) must be >= t_grow ({self.t_grow})")
        self.order = np.asarray(self.order, dtype=np.int64)
        if not np.array_equal(np.sort(self.order), np.arange(self.order.size)):
            raise CurriculumError("order must be a permutation of 0..n-1")

    @classmethod
    def from_scores(cls, scores, lambda0: float = 0.3, t_grow: Optional[int] = None,
                    total_epochs: int = 20):
        if t_grow is None:
            t_grow = max(1, round(0.6 * total_epochs))
        return cls(lambda0, t_grow, total_epochs, rank_by_difficulty(scores))

    @property
    def n(self) -> int:
        return self.order.size

    def fraction(self, t: int) -> float:
        return lambda_t(self.lambda0, self.t_grow, t)

    def size_at(self, t: int) -> int:
        return subset_size(self.n, self.fraction(t))


def subset_at_epoch(schedule: CurriculumSchedule, t: int) -> np.ndarray:
    """The ``ceil(n * lambda(t))`` easiest sample indices, easiest first."""
    if not 0 <= t < schedule.total_epochs:
        raise CurriculumError(f"epoch {t} outside 0..{schedule.total_epochs - 1}")
    return schedule.order[:schedule.size_at(t)].copy()


@dataclass
class ScheduleConfig:
    lambda0: float = 0.3
    t_grow: Optional[int] = None
    total_epochs: int = 20
    steps_per_epoch: int = 50


def run_curriculum(model, samples: Sequence[WindowSample], scores, schedule: CurriculumSchedule,
                   steps_per_epoch: int, train: Optional[TrainConfig] = None, seed: int = 0):
    """Fine-tune a copy of ``model`` on growing easy-first subsets.

    Epoch ``t`` draws its batches uniformly from ``subset_at_epoch(t)``. The
    pool is kept in sample-index order, so with ``lambda0 == 1`` every epoch
    sees the same pool as plain fine-tuning and the run is bit-identical to
    :func:`ccl.forecaster.finetune` with the same seed.

    Returns ``(tuned_model, epoch_log)``.
    """
    if not samples:
        raise CurriculumError("curriculum dataset is empty")
    if scores is None or len(scores) != len(samples):
        raise CurriculumError("every sample needs a difficulty score")
    if schedule.n != len(samples):
        raise CurriculumError("schedule was built for a different number of samples")
    model = model.thaw()
    train = train or TrainConfig()
    pools = [np.sort(subset_at_epoch(schedule, t)) for t in range(schedule.total_epochs)]
    X, Y = samples_to_arrays(samples, model.native_horizon)
    steps = [steps_per_epoch] * schedule.total_epochs
    losses = train_on_pools(model, X, Y, pools, steps, train, seed) if steps_per_epoch > 0 \
        else [float("nan")] * schedule.total_epochs
    epoch_log = [{"epoch": t, "lambda": schedule.fraction(t), "size": int(pool.size),
                  "loss": loss, "pool": pool.tolist()}
                 for t, (pool, loss) in enumerate(zip(pools, losses))]
    return model, epoch_log


def replay(model, samples: Sequence[WindowSample], epoch_log, steps_per_epoch: int,
           train: Optional[TrainConfig] = None, seed: int = 0):
    """Re-run a logged curriculum from its recorded per-epoch pools."""
    model = model.thaw()
    X, Y = samples_to_arrays(samples, model.native_horizon)
    pools = [np.asarray(e["pool"], dtype=np.int64) for e in epoch_log]
    train_on_pools(model, X, Y, pools, [steps_per_epoch] * len(pools), train or TrainConfig(), seed)
    return model


# ---------------------------------------------------------------------------
# scoring the merged pool

class Mode(str, enum.Enum):
    CCL = "ccl"
    CL_ABLATION = "cl_ablation"


@dataclass
class ScoredPool:
    """Real and simulated windows merged into one pool with difficulty scores."""

    samples: list
    scores: list
    info: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.scores])


def assign_all_difficulties(model, reals: Sequence[WindowSample], simulateds: Sequence[WindowSample],
                            config: Optional[EncoderConfig] = None, mode=Mode.CCL,
                            seed: int = 0) -> ScoredPool:
    """Score every window of the fine-tuning pool on one scale.

    In CCL mode real windows get the frozen model's CV-RMSE and simulated ones
    inherit the score of their nearest real window under a contrastively
    trained encoder. In the ablation mode both are scored by CV-RMSE directly.
    Windows with zero-mean targets are dropped.
    """
    mode = Mode(mode)
    config = config or EncoderConfig()
    if not getattr(model, "frozen", False):
        raise FrozenModelError("difficulty must be measured against the frozen model")
    if not reals:
        raise CurriculumError("at least one real window is required")
    info = {"mode": mode.value}

    n_given = len(reals)
    real_scores, kept = cl.measure_difficulties(model, reals)
    reals = [reals[i] for i in kept]
    info["n_real"] = len(reals)
    info["excluded"] = n_given - len(reals)
    if not reals:
        raise CurriculumError("no real window has a defined difficulty")

    if mode is Mode.CL_ABLATION:
        sim_scores, sim_kept = cl.measure_difficulties(model, simulateds, allow_simulated=True)
        info["excluded"] += len(simulateds) - len(sim_kept)
        simulateds = [simulateds[i] for i in sim_kept]
        info["n_simulated"] = len(simulateds)
        return ScoredPool(list(reals) + simulateds, real_scores + sim_scores, info)

    info["n_simulated"] = len(simulateds)
    if not simulateds:
        info["encoder"] = "skipped: no simulated windows"
        return ScoredPool(list(reals), real_scores, info)

    values = np.array([s.value for s in real_scores])
    sim_keys = [s.key for s in simulateds]
    if values.max() - values.min() < config.delta:
        median = float(np.median(values))
        log.warning("all real difficulties lie within delta; simulated windows get the median %.4f",
                    median)
        info["encoder"] = "skipped: degenerate difficulty spread"
        sim_scores = [DifficultyScore(median, Provenance.TRANSFERRED, k) for k in sim_keys]
        return ScoredPool(list(reals) + simulateds, real_scores + sim_scores, info)

    pairs = cl.build_pairs(real_scores, config.delta, config.j_max, config.k_max, seed)
    encoder, losses = cl.train_encoder(pairs, reals, config, seed=seed, scores=real_scores)
    reference = cl.build_reference(encoder, reals, real_scores)
    sim_emb = encoder.encode_batch(cl.sample_matrix(simulateds))
    sim_scores = cl.transfer_difficulties(sim_emb, reference, sim_keys, config.literal_argmin)
    info.update(encoder="trained", n_pairs=len(pairs), encoder_losses=losses)
    return ScoredPool(list(reals) + simulateds, real_scores + sim_scores, info)
