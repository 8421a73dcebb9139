"""Forecaster-error difficulty, contrastive pairs, the TCN encoder and transfer.

Real windows are scored by the frozen forecaster's CV-RMSE. Two real windows
whose scores differ by less than ``delta`` form a positive pair, otherwise a
negative pair weighted by the score gap. An encoder trained on those pairs
embeds simulated windows, which then inherit the score of their most similar
real window.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .forecaster import ZeroMeanTargetError, cv_rmse
from .series import Origin, WindowSample

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.01


class ContrastiveError(ValueError):
    pass


class Provenance(str, enum.Enum):
    MEASURED = "measured"
    TRANSFERRED = "transferred"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class DifficultyScore:
    value: float
    provenance: Provenance
    sample: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.value) and self.value >= 0):
            raise ContrastiveError(f"difficulty must be finite and >= 0, got {self.value!r}")


# ---------------------------------------------------------------------------
# difficulty of real windows

def difficulty_real(model, u: WindowSample, allow_simulated: bool = False) -> DifficultyScore:
    """CV-RMSE of the frozen ``model`` on ``u``."""
    if not getattr(model, "frozen", False):
        raise ContrastiveError("difficulty must be measured with a frozen model")
    if u.origin is not Origin.REAL and not allow_simulated:
        raise ContrastiveError(f"{u.key} is simulated; measured difficulty applies to real windows")
    return DifficultyScore(cv_rmse(u.y, model.predict(u.x)), Provenance.MEASURED, u.key)


def measure_difficulties(model, samples: Sequence[WindowSample], allow_simulated: bool = False):
    """Batch version of :func:`difficulty_real`.

    Returns ``(scores, kept)`` where ``kept`` lists the indices of samples that
    received a score; windows with a zero-mean target are dropped and counted
    in the log.
    """
    if not getattr(model, "frozen", False):
        raise ContrastiveError("difficulty must be measured with a frozen model")
    if not samples:
        return [], []
    if not allow_simulated and any(s.origin is not Origin.REAL for s in samples):
        raise ContrastiveError("measured difficulty applies to real windows only")
    if model.horizon != samples[0].T:
        model = model.with_horizon(samples[0].T)
    preds = model.predict_batch(np.stack([s.x for s in samples]))
    scores, kept = [], []
    for i, (s, p) in enumerate(zip(samples, preds)):
        try:
            value = cv_rmse(s.y, p)
        except ZeroMeanTargetError:
            continue
        scores.append(DifficultyScore(value, Provenance.MEASURED, s.key))
        kept.append(i)
    if len(kept) < len(samples):
        log.warning("excluded %d window(s) with zero-mean targets from difficulty scoring",
                    len(samples) - len(kept))
    return scores, kept


def comprehension(d1, d2) -> float:
    """Absolute gap between two difficulty scores of the same frozen model."""
    a = d1.value if isinstance(d1, DifficultyScore) else float(d1)
    b = d2.value if isinstance(d2, DifficultyScore) else float(d2)
    return abs(a - b)


# ---------------------------------------------------------------------------
# pairs

@dataclass
class ContrastivePairSet:
    anchor: int
    positives: list
    negatives: list
    negative_weights: list
    delta: float

    @property
    def degenerate(self) -> bool:
        """True when the anchor has no negatives and cannot enter the loss."""
        return not self.negatives

    def to_dict(self):
        d = asdict(self)
        d["degenerate"] = self.degenerate
        return d


def _values(scores) -> np.ndarray:
    return np.array([s.value if isinstance(s, DifficultyScore) else float(s) for s in scores],
                    dtype=np.float64)


def build_pairs(scores, delta: float = DEFAULT_DELTA, j_max: int = 4, k_max: int = 64,
                seed: int = 0) -> list[ContrastivePairSet]:
    """Positive and negative partners for every anchor.

    Candidates with a score gap below ``delta`` are positives, the rest
    negatives; up to ``j_max`` / ``k_max`` of each are sampled uniformly
    without replacement. Negative weights are the score gaps. Anchors without
    any positive candidate are skipped.
    """
    values = _values(scores)
    n = values.size
    if n < 2:
        raise ContrastiveError("need at least two scored samples to build pairs")
    if delta < 0:
        raise ContrastiveError(f"delta must be >= 0, got {delta!r}")
    rng = np.random.default_rng(seed)
    out, skipped = [], 0
    for i in range(n):
        gaps = np.abs(values - values[i])
        others = np.arange(n) != i
        pos = np.flatnonzero(others & (gaps < delta))
        neg = np.flatnonzero(others & (gaps >= delta))
        if pos.size == 0:
            skipped += 1
            continue
        if pos.size > j_max:
            pos = np.sort(rng.choice(pos, j_max, replace=False))
        if neg.size > k_max:
            neg = np.sort(rng.choice(neg, k_max, replace=False))
        out.append(ContrastivePairSet(i, pos.tolist(), neg.tolist(), gaps[neg].tolist(), delta))
    if skipped:
        log.info("skipped %d anchor(s) without a positive partner", skipped)
    n_degenerate = sum(p.degenerate for p in out)
    if n_degenerate:
        log.warning("%d anchor(s) have no negative partner", n_degenerate)
    return out


def save_pairs(pairs: Sequence[ContrastivePairSet], path) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_dict() for p in pairs], fh, indent=1)


# ---------------------------------------------------------------------------
# weighted InfoNCE

def _logsumexp(z):
    m = z.max()
    return m + np.log(np.sum(np.exp(z - m)))


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _cosines(anchor, others):
    na = np.linalg.norm(anchor)
    no = np.linalg.norm(others, axis=1)
    if na == 0.0 or np.any(no == 0.0):
        raise dm.DiffMathError("cosine similarity of a zero-norm vector")
    return others @ anchor / (no * na), na, no


def _cosine_grads(g, anchor, others, cos, na, no):
    # g[i] = dL/dcos_i
    d_anchor = (g[:, None] * (others / (no[:, None] * na) - cos[:, None] * anchor / na**2)).sum(axis=0)
    d_others = g[:, None] * (anchor / (no[:, None] * na) - cos[:, None] * others / no[:, None] ** 2)
    return d_anchor, d_others


def weighted_info_nce(anchor, positives, negatives, weights, tau: float = 0.1,
                      standard: bool = False, weight_floor: float = 1e-4):
    """Weighted InfoNCE loss of one anchor and its gradients.

    ``loss = -log( sum_j exp(cos(a, p_j)/tau) / sum_k w_k exp(cos(a, n_k)/tau) )``

    The denominator runs over negatives only unless ``standard`` is set, in
    which case the positive terms join it (weight 1). Weights are clamped to
    ``weight_floor`` from below.

    Returns ``(loss, d_anchor, d_positives, d_negatives)``.
    """
    if not tau > 0:
        raise ContrastiveError(f"temperature must be > 0, got {tau!r}")
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if positives.size == 0 or negatives.size == 0:
        raise ContrastiveError("weighted InfoNCE needs at least one positive and one negative")
    if weights.size != negatives.shape[0]:
        raise ContrastiveError("one weight per negative is required")
    if not np.any(weights > 0):
        raise ContrastiveError("all negative weights are zero")
    weights = np.maximum(weights, weight_floor)

    cos_p, na, n_p = _cosines(anchor, positives)
    cos_n, _, n_n = _cosines(anchor, negatives)
    z_pos = cos_p / tau
    z_neg = cos_n / tau + np.log(weights)
    if standard:
        z_den = np.concatenate([z_pos, z_neg])
    else:
        z_den = z_neg
    loss = -_logsumexp(z_pos) + _logsumexp(z_den)

    g_pos = -_softmax(z_pos)
    g_den = _softmax(z_den)
    if standard:
        g_pos = g_pos + g_den[:z_pos.size]
        g_neg = g_den[z_pos.size:]
    else:
        g_neg = g_den
    da_p, d_pos = _cosine_grads(g_pos / tau, anchor, positives, cos_p, na, n_p)
    da_n, d_neg = _cosine_grads(g_neg / tau, anchor, negatives, cos_n, na, n_n)
    return float(loss), da_p + da_n, d_pos, d_neg


# ---------------------------------------------------------------------------
# encoder

@dataclass
class EncoderConfig:
    """Encoder architecture and training settings.

    ``momentum`` is the decay of the key encoder that fills the memory bank
    and embeds positives; 0 makes the key encoder track the online encoder
    exactly.
    """

    channels: int = 16
    dilations: tuple = (1, 2, 4)
    kernel_size: int = 3
    dim: int = 64
    tau: float = 0.1
    delta: float = DEFAULT_DELTA
    j_max: int = 4
    k_max: int = 64
    bank_capacity: int = 4096
    epochs: int = 30
    lr: float = 1e-3
    anchors_per_step: int = 16
    momentum: float = 0.99
    standard_denominator: bool = False
    weight_floor: float = 1e-4
    literal_argmin: bool = False


class TCNEncoder:
    """Per-window z-scored input, residual TCN, mean pool, projection, unit norm.

    Pooled features are standardized with fixed statistics before the
    projection. The statistics start as identity and are set once from the
    training windows by :meth:`fit_feature_stats`; without them every window
    pools to nearly the same feature vector and all embeddings start out
    almost parallel.
    """

    def __init__(self, input_length: int, channels: int = 16, dilations=(1, 2, 4),
                 kernel_size: int = 3, dim: int = 64, tau: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_length = input_length
        self.channels = channels
        self.dilations = tuple(int(d) for d in dilations)
        self.kernel_size = kernel_size
        self.dim = dim
        self.tau = tau
        self.seed = seed
        self.trunk = dm.TemporalConvStack(1, channels, dilations, kernel_size, rng, prefix="enc")
        self.proj_w = dm.Parameter("proj.w", rng.normal(0.0, 1.0 / np.sqrt(channels), (dim, channels)))
        self.proj_b = dm.Parameter("proj.b", np.zeros(dim))
        self.feat_mean = np.zeros(channels)
        self.feat_std = np.ones(channels)

    @classmethod
    def from_config(cls, input_length: int, config: EncoderConfig, seed: int = 0):
        return cls(input_length, config.channels, config.dilations, config.kernel_size,
                   config.dim, config.tau, seed)

    def parameters(self):
        return list(self.trunk.params.values()) + [self.proj_w, self.proj_b]

    def state(self):
        state = {p.name: p.value.copy() for p in self.parameters()}
        state["feat.mean"] = self.feat_mean.copy()
        state["feat.std"] = self.feat_std.copy()
        return state

    def load_state(self, state):
        for p in self.parameters():
            p.value = np.asarray(state[p.name], dtype=np.float64).reshape(p.value.shape).copy()
        self.feat_mean = np.asarray(state["feat.mean"], dtype=np.float64).copy()
        self.feat_std = np.asarray(state["feat.std"], dtype=np.float64).copy()

    def _prepare(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_length:
            raise ContrastiveError(f"encoder expects length {self.input_length}, got {X.shape[1]}")
        mu = X.mean(axis=1, keepdims=True)
        sd = X.std(axis=1, keepdims=True)
        return (X - mu) / np.where(sd > 1e-8, sd, 1.0)

    def _pooled(self, X):
        h, trunk_cache = self.trunk.forward(self._prepare(X)[:, None, :])
        return dm.global_mean_pool_forward(h), h.shape, trunk_cache

    def fit_feature_stats(self, X, chunk: int = 256) -> None:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        pooled = np.concatenate([self._pooled(X[i:i + chunk])[0]
                                 for i in range(0, X.shape[0], chunk)], axis=0)
        self.feat_mean = pooled.mean(axis=0)
        std = pooled.std(axis=0)
        self.feat_std = np.where(std > 1e-8, std, 1.0)

    def forward(self, X):
        pooled, h_shape, trunk_cache = self._pooled(X)
        feats = (pooled - self.feat_mean) / self.feat_std
        z = dm.dense_forward(feats, self.proj_w.value, self.proj_b.value)
        emb, norm = dm.l2_normalize_forward(z)
        return dm.check_finite(emb, "encoder output"), (h_shape, trunk_cache, feats, emb, norm)

    def backward(self, d_emb, cache):
        h_shape, trunk_cache, feats, emb, norm = cache
        dz = dm.l2_normalize_backward(d_emb, emb, norm)
        dfeats, dW, db = dm.dense_backward(dz, feats, self.proj_w.value)
        self.proj_w.grad += dW
        self.proj_b.grad += db
        dpooled = dfeats / self.feat_std
        self.trunk.backward(dm.global_mean_pool_backward(dpooled, h_shape[-1]), trunk_cache)

    def encode_batch(self, X, chunk: int = 256) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.concatenate([self.forward(X[i:i + chunk])[0]
                               for i in range(0, X.shape[0], chunk)], axis=0)

    def copy(self) -> "TCNEncoder":
        return copy.deepcopy(self)

    def describe(self):
        return {"kind": "tcn_encoder", "input_length": self.input_length,
                "channels": self.channels, "dilations": list(self.dilations),
                "kernel_size": self.kernel_size, "dim": self.dim, "tau": self.tau,
                "seed": self.seed}

    def save(self, path):
        dm.save_params(self.state(), path, meta=self.describe())


def load_encoder(path) -> TCNEncoder:
    params, meta = dm.load_params(path)
    if meta.get("kind") != "tcn_encoder":
        raise ContrastiveError(f"{path}: not an encoder checkpoint")
    enc = TCNEncoder(meta["input_length"], meta["channels"], meta["dilations"],
                     meta["kernel_size"], meta["dim"], meta["tau"], meta.get("seed", 0))
    enc.load_state(params)
    return enc


def encode(encoder: TCNEncoder, u: WindowSample) -> np.ndarray:
    """Unit-norm embedding of the whole window (look-back followed by target)."""
    return encoder.forward(u.concat()[None])[0][0]


def sample_matrix(samples: Sequence[WindowSample]) -> np.ndarray:
    return np.stack([s.concat() for s in samples])


# ---------------------------------------------------------------------------
# memory bank

class MemoryBank:
    """FIFO ring of detached embeddings keyed by sample index."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContrastiveError("memory bank capacity must be >= 1")
        self.capacity = capacity
        self.embeddings = np.zeros((capacity, dim))
        self.keys = np.full(capacity, -1, dtype=np.int64)
        self.scores = np.full(capacity, np.nan)
        self.cursor = 0
        self.written = 0
        self._slot: dict[int, int] = {}

    def __len__(self):
        return self.written

    def write(self, indices, embeddings, scores=None) -> None:
        embeddings = np.atleast_2d(embeddings)
        scores = np.full(len(indices), np.nan) if scores is None else np.asarray(scores, dtype=float)
        for key, emb, score in zip(indices, embeddings, scores):
            slot = self.cursor
            old = int(self.keys[slot])
            if old >= 0 and self._slot.get(old) == slot:
                del self._slot[old]
            self.embeddings[slot] = emb
            self.keys[slot] = int(key)
            self.scores[slot] = score
            self._slot[int(key)] = slot
            self.cursor = (self.cursor + 1) % self.capacity
            self.written = min(self.written + 1, self.capacity)

    def lookup(self, indices):
        """Latest stored embedding per index. Returns ``(embeddings, hit_mask)``."""
        hits = np.array([int(i) in self._slot for i in indices], dtype=bool)
        out = np.zeros((len(indices), self.embeddings.shape[1]))
        for row, (i, hit) in enumerate(zip(indices, hits)):
            if hit:
                out[row] = self.embeddings[self._slot[int(i)]]
        return out, hits

    def __contains__(self, index):
        return int(index) in self._slot


# ---------------------------------------------------------------------------
# training

def train_encoder(pairs: Sequence[ContrastivePairSet], samples: Sequence[WindowSample],
                  config: Optional[EncoderConfig] = None, epochs: Optional[int] = None,
                  seed: int = 0, scores=None, encoder: Optional[TCNEncoder] = None):
    """Train the encoder on pair sets with negatives served from a memory bank.

    Each step takes ``anchors_per_step`` pair sets. Anchors are encoded by
    the online encoder and carry the gradient. Positives are encoded fresh by
    a key encoder, a slowly moving average of the online one, and negatives
    are read from the bank as constants (bank misses are encoded by the key
    encoder and written). The step's key embeddings of anchors and positives
    are then written to the bank.

    With ``config.momentum == 0`` the key encoder equals the online encoder
    at every step. Stale negatives then drag all embeddings along a common
    drift direction and training tends to collapse them onto one point.

    Returns ``(encoder, epoch_losses)``.
    """
    config = config or EncoderConfig()
    epochs = config.epochs if epochs is None else epochs
    usable = [p for p in pairs if not p.degenerate]
    if not usable:
        raise ContrastiveError("no pair set with both positives and negatives to train on")
    if not 0.0 <= config.momentum < 1.0:
        raise ContrastiveError(f"momentum must lie in [0, 1), got {config.momentum!r}")
    X = sample_matrix(samples)
    values = _values(scores) if scores is not None else np.full(len(samples), np.nan)
    if encoder is None:
        encoder = TCNEncoder.from_config(X.shape[1], config, seed)
        encoder.fit_feature_stats(X)
    key = encoder.copy()
    bank = MemoryBank(config.bank_capacity, config.dim)
    opt = dm.Adam(config.lr)
    params = encoder.parameters()
    key_params = key.parameters()
    rng = np.random.default_rng(seed + 1)
    epoch_losses = []

    for _ in range(epochs):
        order = rng.permutation(len(usable))
        step_losses = []
        for start in range(0, len(order), config.anchors_per_step):
            batch = [usable[i] for i in order[start:start + config.anchors_per_step]]
            anchors = sorted({p.anchor for p in batch})
            arow = {idx: row for row, idx in enumerate(anchors)}
            emb, cache = encoder.forward(X[anchors])
            positives = sorted({j for p in batch for j in p.positives})
            prow = {idx: row for row, idx in enumerate(positives)}
            pos_emb = key.encode_batch(X[positives])

            needed = sorted({k for p in batch for k in p.negatives})
            neg_emb, hits = bank.lookup(needed)
            if not hits.all():
                missing = [k for k, h in zip(needed, hits) if not h]
                miss_emb = key.encode_batch(X[missing])
                bank.write(missing, miss_emb, values[missing])
                neg_emb[~hits] = miss_emb
            nrow = {k: row for row, k in enumerate(needed)}

            d_emb = np.zeros_like(emb)
            total = 0.0
            for p in batch:
                loss, da, _, _ = weighted_info_nce(
                    emb[arow[p.anchor]], pos_emb[[prow[j] for j in p.positives]],
                    neg_emb[[nrow[k] for k in p.negatives]], p.negative_weights,
                    encoder.tau, config.standard_denominator, config.weight_floor)
                total += loss
                d_emb[arow[p.anchor]] += da
            for prm in params:
                prm.zero_grad()
            encoder.backward(d_emb / len(batch), cache)
            opt.step(params)

            m = config.momentum
            for kp, op in zip(key_params, params):
                kp.value = m * kp.value + (1.0 - m) * op.value
            fresh = sorted(set(anchors) | set(positives))
            bank.write(fresh, key.encode_batch(X[fresh]), values[fresh])
            step_losses.append(total / len(batch))
        epoch_losses.append(float(np.mean(step_losses)))
    return encoder, epoch_losses


# ---------------------------------------------------------------------------
# transfer

def _unit_rows(E):
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise dm.DiffMathError("cosine similarity of a zero-norm vector")
    return E / norms


def nearest_reference(queries, references, literal_argmin: bool = False, chunk: int = 64):
    """Index of the most cosine-similar reference for each query.

    Ties go to the lowest reference index. With ``literal_argmin`` the least
    similar reference is returned instead.
    """
    R = _unit_rows(references)
    Q = _unit_rows(queries)
    if R.shape[0] == 0:
        raise ContrastiveError("reference set is empty")
    out = np.empty(Q.shape[0], dtype=np.int64)
    for start in range(0, Q.shape[0], chunk):
        # row-wise products keep every similarity's summation order identical,
        # so duplicated references tie exactly
        sims = np.sum(Q[start:start + chunk, None, :] * R[None, :, :], axis=2)
        out[start:start + chunk] = (np.argmin(sims, axis=1) if literal_argmin
                                    else np.argmax(sims, axis=1))
    return out


@dataclass
class ReferenceSet:
    """Real windows' embeddings and measured scores used for transfer."""

    embeddings: np.ndarray
    scores: list
    keys: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.scores) == 0:
            raise ContrastiveError("reference set is empty")
        if len(self.scores) != np.atleast_2d(self.embeddings).shape[0]:
            raise ContrastiveError("one score per reference embedding is required")


def build_reference(encoder: TCNEncoder, reals: Sequence[WindowSample], scores) -> ReferenceSet:
    emb = encoder.encode_batch(sample_matrix(reals))
    return ReferenceSet(emb, list(scores), [r.key for r in reals])


def transfer_difficulties(query_embeddings, reference: ReferenceSet, keys=None,
                          literal_argmin: bool = False) -> list[DifficultyScore]:
    values = _values(reference.scores)
    idx = nearest_reference(query_embeddings, reference.embeddings, literal_argmin)
    keys = keys if keys is not None else [""] * len(idx)
    return [DifficultyScore(float(values[i]), Provenance.TRANSFERRED, k) for i, k in zip(idx, keys)]


def difficulty_simulated(encoder: TCNEncoder, reference: ReferenceSet, u: WindowSample,
                         literal_argmin: bool = False) -> DifficultyScore:
    """Score of the real window whose embedding is most similar to ``u``'s."""
    return transfer_difficulties(encode(encoder, u)[None], reference, [u.key], literal_argmin)[0]
