"""Experiment orchestration: corpora, strategies, seeded reports and size sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import contrastive as cl
from .curriculum import CurriculumSchedule, Mode, assign_all_difficulties, run_curriculum
from .forecaster import (
    ASHRAE_THRESHOLD,
    FewShotConfig,
    PretrainConfig,
    Protocol,
    TrainConfig,
    evaluate,
    finetune,
    load_forecaster,
    pretrain,
)
from .series import GeneratorConfig, generate_synthetic, load_csv, rolling_windows

log = logging.getLogger(__name__)

STRATEGIES = ("Pretrained", "FT", "CL_FT", "CCL_FT")
REPORT_FORMAT = "ccl-report"
REPORT_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


# ---------------------------------------------------------------------------
# configuration

def _range(value, name):
    lo, hi = (value, value) if np.isscalar(value) else value
    if hi < lo:
        raise ConfigError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return float(lo), float(hi)


@dataclass
class GeneratorFamily:
    """A population of synthetic buildings.

    Ranges are ``[low, high]`` pairs drawn uniformly per building; list
    fields hold choices drawn uniformly per building.
    """

    n_series: int = 10
    n_days: int = 60
    base_load: list = field(default_factory=lambda: [8.0, 12.0])
    daily_amplitude: list = field(default_factory=lambda: [1.0, 3.0])
    weekly_amplitude: list = field(default_factory=lambda: [0.0, 0.0])
    noise_sigma: list = field(default_factory=lambda: [0.1])
    regime_shift_prob: list = field(default_factory=lambda: [0.0])
    regime_shift_scale: list = field(default_factory=lambda: [1.0, 1.0])
    origin: str = "real"

    def configs(self, rng, prefix: str) -> list[tuple[str, GeneratorConfig]]:
        out = []
        for i in range(self.n_series):
            cfg = GeneratorConfig(
                n_days=self.n_days,
                base_load=rng.uniform(*_range(self.base_load, "base_load")),
                daily_amplitude=rng.uniform(*_range(self.daily_amplitude, "daily_amplitude")),
                weekly_amplitude=rng.uniform(*_range(self.weekly_amplitude, "weekly_amplitude")),
                noise_sigma=float(rng.choice(self.noise_sigma)),
                regime_shift_prob=float(rng.choice(self.regime_shift_prob)),
                regime_shift_scale=rng.uniform(*_range(self.regime_shift_scale, "regime_shift_scale")),
                seed=int(rng.integers(0, 2**31 - 1)),
                origin=self.origin)
            out.append((f"{prefix}{i:03d}", cfg))
        return out


@dataclass
class CorpusSpec:
    """Where a corpus comes from and how its windows are sampled.

    Exactly one of ``generator`` and ``csv`` is set. ``generator`` is one
    family or a list of families pooled together. ``csv`` entries are
    ``{"path": ..., "value_column": ..., "id": ...}`` objects. ``n_windows``
    subsamples the rolling windows (all are kept when ``None``).
    """

    generator: Optional[object] = None
    csv: Optional[list] = None
    n_windows: Optional[int] = None
    stride: int = 1


@dataclass
class ScheduleSettings:
    lambda0: float = 0.3
    t_grow: Optional[int] = None
    total_epochs: int = 20


@dataclass
class ExperimentConfig:
    L: int = 96
    T: int = 24
    horizons: list = field(default_factory=lambda: [24, 96])
    protocols: list = field(default_factory=lambda: ["zero-shot", "few-shot"])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    encoder: dict = field(default_factory=dict)
    few_shot: dict = field(default_factory=dict)
    eval_stride: int = 24
    fraction: float = 1.0
    output_dir: Optional[str] = None
    workers: int = 1

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        raw = dict(raw)
        if "schedule" in raw:
            raw["schedule"] = build_section(ScheduleSettings, raw["schedule"], "schedule")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config: file {os.fspath(path)} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: malformed JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def content_dict(self) -> dict:
        """Everything that affects results; output location and workers are left out."""
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("workers", None)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        for name in ("L", "T", "eval_stride", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if not self.horizons or any(not isinstance(h, int) or h < 1 for h in self.horizons):
            raise ConfigError(f"horizons: must be positive integers, got {self.horizons!r}")
        try:
            [Protocol(p) for p in self.protocols]
        except ValueError:
            raise ConfigError(f"protocols: unknown protocol in {self.protocols!r}") from None
        if not self.protocols:
            raise ConfigError("protocols: at least one protocol is required")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"strategies: must be drawn from {list(STRATEGIES)}, got {self.strategies!r}")
        if not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError(f"seeds: at least one integer seed is required, got {self.seeds!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction: must lie in (0, 1], got {self.fraction!r}")
        s = self.schedule
        if not 0.0 < s.lambda0 <= 1.0:
            raise ConfigError(f"schedule.lambda0: must lie in (0, 1], got {s.lambda0!r}")
        if s.total_epochs < 1:
            raise ConfigError(f"schedule.total_epochs: must be >= 1, got {s.total_epochs!r}")
        if s.t_grow is not None and not 1 <= s.t_grow <= s.total_epochs:
            raise ConfigError(f"schedule.t_grow: must lie in [1, total_epochs], got {s.t_grow!r}")
        for name in ("real", "targets"):
            if name not in self.data:
                raise ConfigError(f"data.{name}: corpus is required")
        if "pretrain" not in self.data and not self.pretrain.get("checkpoint"):
            raise ConfigError("data.pretrain: corpus is required unless pretrain.checkpoint is set")
        for name in self.data:
            if name not in ("pretrain", "real", "simulated", "targets"):
                raise ConfigError(f"data.{name}: unknown corpus")
            self.corpus(name)
        self.pretrain_config()
        self.finetune_config()
        self.encoder_config()
        self.few_shot_config()

    # -- typed views -------------------------------------------------------

    def corpus(self, name) -> Optional[CorpusSpec]:
        raw = self.data.get(name)
        if raw is None:
            return None
        spec = build_section(CorpusSpec, raw, f"data.{name}")
        if (spec.generator is None) == (spec.csv is None):
            raise ConfigError(f"data.{name}: set exactly one of 'generator' and 'csv'")
        if spec.generator is not None:
            raw_fams = spec.generator if isinstance(spec.generator, list) else [spec.generator]
            if not raw_fams:
                raise ConfigError(f"data.{name}.generator: at least one family is required")
            spec.generator = [build_section(GeneratorFamily, f, f"data.{name}.generator") for f in raw_fams]
            for fam in spec.generator:
                if fam.n_series < 1:
                    raise ConfigError(f"data.{name}.generator.n_series: must be >= 1")
        if spec.n_windows is not None and spec.n_windows < 1:
            raise ConfigError(f"data.{name}.n_windows: must be >= 1")
        if spec.stride < 1:
            raise ConfigError(f"data.{name}.stride: must be >= 1")
        return spec

    def pretrain_config(self) -> PretrainConfig:
        raw = dict(self.pretrain)
        raw.pop("checkpoint", None)
        train = _train(raw, "pretrain", TrainConfig(lr=2e-3))
        cfg = build_section(PretrainConfig, raw, "pretrain")
        cfg.dilations = tuple(cfg.dilations)
        cfg.train = train
        return cfg

    def finetune_config(self) -> tuple[int, TrainConfig]:
        raw = dict(self.finetune)
        steps = raw.pop("steps", 1000)
        if not isinstance(steps, int) or steps < 0:
            raise ConfigError(f"finetune.steps: must be a nonnegative integer, got {steps!r}")
        train = _train(raw, "finetune", TrainConfig())
        if raw:
            raise ConfigError(f"finetune.{sorted(raw)[0]}: unknown field")
        return steps, train

    def encoder_config(self) -> cl.EncoderConfig:
        cfg = build_section(cl.EncoderConfig, self.encoder, "encoder")
        cfg.dilations = tuple(cfg.dilations)
        return cfg

    def few_shot_config(self) -> FewShotConfig:
        raw = dict(self.few_shot)
        train = _train(raw, "few_shot", TrainConfig(batch_size=8, lr=5e-4))
        cfg = build_section(FewShotConfig, raw, "few_shot")
        cfg.train = train
        if not 0.0 < cfg.fraction < 1.0:
            raise ConfigError(f"few_shot.fraction: must lie in (0, 1), got {cfg.fraction!r}")
        return cfg

    def steps_per_epoch(self) -> int:
        steps, _ = self.finetune_config()
        return steps // self.schedule.total_epochs


def build_section(cls, raw, where):
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _train(raw: dict, where: str, default: TrainConfig) -> TrainConfig:
    # optimizer keys sit flat next to the other settings
    kw = {}
    for name in ("batch_size", "lr", "lr_schedule", "beta1", "beta2", "eps"):
        if name in raw:
            kw[name] = raw.pop(name)
    train = TrainConfig(**{**asdict(default), **kw})
    if train.batch_size < 1:
        raise ConfigError(f"{where}.batch_size: must be >= 1")
    if train.lr < 0:
        raise ConfigError(f"{where}.lr: must be >= 0")
    if train.lr_schedule not in ("constant", "linear"):
        raise ConfigError(f"{where}.lr_schedule: must be 'constant' or 'linear'")
    return train


# ---------------------------------------------------------------------------
# corpora

_CORPUS_CODES = {"pretrain": 1, "real": 2, "simulated": 3, "targets": 4}


def build_series(spec: CorpusSpec, name: str, seed: int):
    """Series of one corpus. Generated corpora depend on ``seed`` and ``name``."""
    if spec.csv is not None:
        out = []
        for entry in spec.csv:
            if "path" not in entry or "value_column" not in entry:
                raise ConfigError(f"data.{name}.csv: entries need 'path' and 'value_column'")
            s = load_csv(entry["path"], entry["value_column"], id=entry.get("id"))
            if name == "simulated":
                s.tags["origin"] = "simulated"
            out.append(s)
        return out
    rng = np.random.default_rng([seed, _CORPUS_CODES[name]])
    out = []
    for k, fam in enumerate(spec.generator):
        prefix = f"{name}-{seed}-" if len(spec.generator) == 1 else f"{name}-{seed}-f{k}-"
        out.extend(generate_synthetic(cfg, id=sid) for sid, cfg in fam.configs(rng, prefix))
    return out


def sample_windows(series, spec: CorpusSpec, L: int, T: int, seed: int, name: str):
    windows = [w for s in series for w in rolling_windows(s, L, T, spec.stride)]
    if not windows:
        raise ConfigError(f"data.{name}: series too short for L={L}, T={T}")
    if spec.n_windows is not None and spec.n_windows < len(windows):
        rng = np.random.default_rng([seed, _CORPUS_CODES[name], 7])
        keep = np.sort(rng.choice(len(windows), spec.n_windows, replace=False))
        windows = [windows[i] for i in keep]
    return windows


def nested_subset(n: int, fraction: float, seed: int, salt: int = 0) -> np.ndarray:
    """Sorted indices of a seeded ``ceil(fraction * n)`` subset.

    Subsets for the same seed are nested: a smaller fraction keeps a prefix
    of the same permutation.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction: must lie in (0, 1], got {fraction!r}")
    perm = np.random.default_rng([seed, 99, salt]).permutation(n)
    k = max(1, min(n, math.ceil(n * fraction - 1e-9)))
    return np.sort(perm[:k])


@dataclass
class SeedData:
    reals: list
    simulateds: list
    targets: list


def build_seed_data(config: ExperimentConfig, seed: int) -> SeedData:
    real_spec = config.corpus("real")
    reals = sample_windows(build_series(real_spec, "real", seed), real_spec,
                           config.L, config.T, seed, "real")
    sims = []
    sim_spec = config.corpus("simulated")
    if sim_spec is not None:
        sims = sample_windows(build_series(sim_spec, "simulated", seed), sim_spec,
                              config.L, config.T, seed, "simulated")
    if config.fraction < 1.0:
        reals = [reals[i] for i in nested_subset(len(reals), config.fraction, seed, 0)]
        if sims:
            sims = [sims[i] for i in nested_subset(len(sims), config.fraction, seed, 1)]
    targets = build_series(config.corpus("targets"), "targets", seed)
    return SeedData(reals, sims, targets)


def build_pretrained(config: ExperimentConfig):
    """Load the configured checkpoint or pre-train a fresh frozen reference."""
    ckpt = config.pretrain.get("checkpoint")
    if ckpt:
        return load_forecaster(ckpt)
    spec = config.corpus("pretrain")
    pcfg = config.pretrain_config()
    series = build_series(spec, "pretrain", pcfg.seed)
    windows = sample_windows(series, spec, config.L, config.T, pcfg.seed, "pretrain")
    return pretrain(windows, config.L, config.T, pcfg)


# ---------------------------------------------------------------------------
# running

def _adapt(strategy, model, data: SeedData, config: ExperimentConfig, seed: int, scored):
    steps, train = config.finetune_config()
    spe = config.steps_per_epoch()
    pool = data.reals + data.simulateds
    if strategy == "Pretrained":
        return model
    if strategy == "FT":
        return finetune(model.thaw(), pool, spe * config.schedule.total_epochs, train, seed)
    mode = Mode.CL_ABLATION if strategy == "CL_FT" else Mode.CCL
    sp = scored[mode]
    s = config.schedule
    sched = CurriculumSchedule.from_scores(sp.scores, s.lambda0, s.t_grow, s.total_epochs)
    tuned, _ = run_curriculum(model, sp.samples, sp.scores, sched, spe, train, seed)
    return tuned


def _evaluate_cells(strategy, tuned, data: SeedData, config: ExperimentConfig, seed: int):
    few = config.few_shot_config()
    few.seed = seed
    cells = []
    for horizon in config.horizons:
        per_target = [(s.id, rolling_windows(s, config.L, horizon, config.eval_stride))
                      for s in data.targets]
        for protocol in config.protocols:
            cell = {"strategy": strategy, "horizon": horizon, "protocol": protocol, "seed": seed}
            try:
                per_dataset = {}
                for sid, windows in per_target:
                    if not windows:
                        raise ValueError(f"target {sid} too short for horizon {horizon}")
                    per_dataset[sid] = evaluate(tuned, windows, protocol, few).aggregate
                agg = float(np.mean(list(per_dataset.values())))
                if not math.isfinite(agg):
                    raise FloatingPointError("non-finite aggregate")
                cell.update(status="ok", aggregate=agg, ashrae_pass=agg < ASHRAE_THRESHOLD,
                            per_dataset=per_dataset)
            except Exception as exc:  # a failed cell must not abort the run
                log.warning("cell %s/%s/%s/seed %d failed: %s", strategy, horizon, protocol, seed, exc)
                cell.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
    return cells


def run_seed(config: ExperimentConfig, model, seed: int):
    """All cells of one seed. Returns ``(cells, seed_info, timing)``."""
    timing = {}
    t0 = time.perf_counter()
    data = build_seed_data(config, seed)
    info = {"seed": seed, "n_real": len(data.reals), "n_simulated": len(data.simulateds),
            "targets": [s.id for s in data.targets]}

    scored = {}
    enc_cfg = config.encoder_config()
    for strategy, mode in (("CL_FT", Mode.CL_ABLATION), ("CCL_FT", Mode.CCL)):
        if strategy in config.strategies:
            t = time.perf_counter()
            try:
                scored[mode] = assign_all_difficulties(model, data.reals, data.simulateds,
                                                       enc_cfg, mode, seed)
                sp = scored[mode]
                info[mode.value] = {k: v for k, v in sp.info.items() if k != "encoder_losses"}
                if "encoder_losses" in sp.info:
                    info[mode.value]["encoder_loss_first"] = sp.info["encoder_losses"][0]
                    info[mode.value]["encoder_loss_last"] = sp.info["encoder_losses"][-1]
            except Exception as exc:
                log.warning("scoring %s for seed %d failed: %s", mode.value, seed, exc)
                info[mode.value] = {"error": f"{type(exc).__name__}: {exc}"}
            timing[f"score_{mode.value}"] = time.perf_counter() - t

    cells = []
    for strategy in config.strategies:
        t = time.perf_counter()
        try:
            if strategy in ("CL_FT", "CCL_FT"):
                mode = Mode.CL_ABLATION if strategy == "CL_FT" else Mode.CCL
                if mode not in scored:
                    raise RuntimeError(info[mode.value]["error"])
            tuned = _adapt(strategy, model, data, config, seed, scored)
            cells.extend(_evaluate_cells(strategy, tuned, data, config, seed))
        except Exception as exc:
            log.warning("strategy %s for seed %d failed: %s", strategy, seed, exc)
            for horizon in config.horizons:
                for protocol in config.protocols:
                    cells.append({"strategy": strategy, "horizon": horizon, "protocol": protocol,
                                  "seed": seed, "status": "failed",
                                  "error": f"{type(exc).__name__}: {exc}"})
        timing[strategy] = time.perf_counter() - t
    timing["total"] = time.perf_counter() - t0
    return cells, info, timing


def _run_seed_job(args):
    config_dict, model, seed = args
    return run_seed(ExperimentConfig.from_dict(config_dict), model, seed)


def _add_improvements(cells):
    base = {(c["horizon"], c["protocol"], c["seed"]): c["aggregate"]
            for c in cells if c["strategy"] == "Pretrained" and c["status"] == "ok"}
    for c in cells:
        ref = base.get((c["horizon"], c["protocol"], c["seed"]))
        if c["status"] == "ok" and ref is not None:
            c["improvement"] = (ref - c["aggregate"]) / ref
    return cells


def summarize(cells, keys=("strategy", "horizon", "protocol")):
    groups = {}
    for c in cells:
        if c["status"] == "ok":
            groups.setdefault(tuple(c[k] for k in keys), []).append(c)
    rows = []
    for key, members in groups.items():
        row = dict(zip(keys, key))
        row["n_seeds"] = len(members)
        row["median_aggregate"] = float(np.median([c["aggregate"] for c in members]))
        if all("improvement" in c for c in members):
            row["median_improvement"] = float(np.median([c["improvement"] for c in members]))
        rows.append(row)
    return rows


def run_experiment(config: ExperimentConfig, model=None, write: bool = True):
    """Run every (strategy, horizon, protocol, seed) cell.

    ``model`` is the frozen reference forecaster; it is built from the config
    when omitted. Returns ``(report, timing)``. When ``config.output_dir`` is
    set and ``write`` is true the report, a per-cell CSV and a separate timing
    file are written atomically.
    """
    started = time.time()
    t0 = time.perf_counter()
    if model is None:
        model = build_pretrained(config)
    t_pre = time.perf_counter() - t0

    jobs = [(config.to_dict(), model, seed) for seed in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [run_seed(config, model, seed) for seed in config.seeds]

    cells = _add_improvements([c for r in results for c in r[0]])
    report = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "config_hash": config.content_hash(),
        "config": config.content_dict(),
        "model": model.describe(),
        "seeds": [r[1] for r in results],
        "cells": cells,
        "summary": summarize(cells),
    }
    timing = {"started_at": started, "pretrain_seconds": t_pre,
              "seeds": {str(seed): r[2] for seed, r in zip(config.seeds, results)},
              "total_seconds": time.perf_counter() - t0}
    if write and config.output_dir:
        write_report(report, timing, config.output_dir)
    return report, timing


def sweep_finetune_size(config: ExperimentConfig, fractions, model=None, write: bool = True):
    """Re-run FT and CCL_FT on nested subsamples of the fine-tuning pool.

    Returns ``(rows, reports)`` where ``rows`` has one entry per
    (fraction, strategy) with median aggregates per horizon and protocol.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError(f"fractions: must lie in (0, 1], got {fractions!r}")
    if fractions != sorted(fractions):
        raise ConfigError("fractions: must be ascending")
    if model is None:
        model = build_pretrained(config)
    reports = {}
    rows = []
    for frac in fractions:
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "fraction": frac,
                                          "strategies": ["FT", "CCL_FT"], "output_dir": None})
        report, _ = run_experiment(cfg, model, write=False)
        reports[frac] = report
        paired = paired_improvements(report, report)
        for strategy in ("FT", "CCL_FT"):
            row = {"fraction": frac, "strategy": strategy, "cells": {}}
            for s in report["summary"]:
                if s["strategy"] == strategy:
                    row["cells"][f"{s['horizon']}/{s['protocol']}"] = s["median_aggregate"]
            if strategy == "CCL_FT":
                row["improvement_over_ft"] = {f"{h}/{p}": v for (h, p), v in paired["cells"].items()}
                row["median_improvement_over_ft"] = paired["overall"]
            rows.append(row)
    if write and config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        _atomic_json({"format": "ccl-sweep", "version": REPORT_VERSION,
                      "config_hash": config.content_hash(), "rows": rows},
                     os.path.join(config.output_dir, "sweep.json"))
    return rows, reports


def paired_improvements(ft_report, ccl_report):
    """Seed-paired relative gains ``(FT - CCL_FT) / FT``.

    Returns medians per ``(horizon, protocol)`` under ``"cells"`` and the
    median over every paired cell under ``"overall"`` (``nan`` if none).
    """
    def table(report, strategy):
        return {(c["horizon"], c["protocol"], c["seed"]): c["aggregate"]
                for c in report["cells"] if c["strategy"] == strategy and c["status"] == "ok"}
    ft = table(ft_report, "FT")
    ccl = table(ccl_report, "CCL_FT")
    groups, every = {}, []
    for key in sorted(set(ft) & set(ccl), key=str):
        gain = (ft[key] - ccl[key]) / ft[key]
        groups.setdefault(key[:2], []).append(gain)
        every.append(gain)
    return {"cells": {k: float(np.median(v)) for k, v in groups.items()},
            "overall": float(np.median(every)) if every else float("nan")}


# ---------------------------------------------------------------------------
# output

def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_json(obj, path):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def report_json(report) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report(report, timing, output_dir) -> None:
    os.makedirs(output_dir, exist_ok=True)
    _atomic_write(os.path.join(output_dir, "report.json"), report_json(report))
    _atomic_json(timing, os.path.join(output_dir, "timing.json"))
    cols = ["strategy", "horizon", "protocol", "seed", "status", "aggregate",
            "ashrae_pass", "improvement", "error"]
    tmp = os.path.join(output_dir, "cells.csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, cols, extrasaction="ignore")
        writer.writeheader()
        for c in report["cells"]:
            writer.writerow({k: (repr(c[k]) if isinstance(c.get(k), float) else c.get(k, ""))
                             for k in cols})
    os.replace(tmp, os.path.join(output_dir, "cells.csv"))
