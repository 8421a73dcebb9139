"""Command line entry point: ``ccl <command> [options]``.

Exit codes: 0 on success, 1 on a configuration or input error, 2 when every
experiment cell failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import contrastive as cl
from .forecaster import (
    FewShotConfig,
    ForecasterError,
    Protocol,
    TrainConfig,
    evaluate,
    finetune,
    load_forecaster,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    GeneratorFamily,
    build_section,
    build_pretrained,
    report_json,
    run_experiment,
    sweep_finetune_size,
)
from .series import generate_synthetic, load_csv, rolling_windows, write_csv

log = logging.getLogger("ccl")

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 1, 2


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what}: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: malformed JSON in {path} ({exc})") from None


def _experiment_config(args) -> ExperimentConfig:
    raw = _read_json(args.config, "config")
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed]
    for name in ("seeds", "output_dir", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    return ExperimentConfig.from_dict(raw)


def _windows(paths, column, L, T, stride):
    out = []
    for p in paths:
        series = load_csv(p, column, id=os.path.splitext(os.path.basename(p))[0])
        out.extend(rolling_windows(series, L, T, stride))
    if not out:
        raise ConfigError(f"data: series too short for L={L}, T={T}")
    return out


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds: expected comma-separated integers, got {text!r}")


def _fractions(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions: expected comma-separated numbers, got {text!r}")


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args):
    raw = _read_json(args.config, "config")
    families = raw if isinstance(raw, list) else [raw]
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    n = 0
    for k, f in enumerate(families):
        fam = build_section(GeneratorFamily, f, f"config[{k}]")
        for sid, cfg in fam.configs(rng, f"{args.prefix}{k}-" if len(families) > 1 else args.prefix):
            write_csv(generate_synthetic(cfg, id=sid), os.path.join(args.out, f"{sid}.csv"))
            n += 1
    print(f"wrote {n} series to {args.out}")


def cmd_pretrain(args):
    config = _experiment_config(args)
    if args.steps is not None:
        config.pretrain["steps"] = args.steps
    config.pretrain.pop("checkpoint", None)
    model = build_pretrained(config)
    model.save(args.out)
    print(f"saved frozen model to {args.out}")


def cmd_measure_difficulty(args):
    model = load_forecaster(args.model)
    windows = _windows(args.data, args.value_column, model.input_length, args.horizon or model.horizon,
                       args.stride)
    scores, _ = cl.measure_difficulties(model, windows, allow_simulated=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "difficulty", "provenance"])
        for s in scores:
            w.writerow([s.sample, repr(s.value), s.provenance.value])
    print(f"scored {len(scores)} windows into {args.out}")


def cmd_train_encoder(args):
    model = load_forecaster(args.model)
    raw = _read_json(args.config, "config") if args.config else {}
    enc_cfg = build_section(cl.EncoderConfig, raw, "encoder")
    enc_cfg.dilations = tuple(enc_cfg.dilations)
    windows = _windows(args.data, args.value_column, model.input_length, model.horizon, args.stride)
    scores, kept = cl.measure_difficulties(model, windows)
    windows = [windows[i] for i in kept]
    pairs = cl.build_pairs(scores, enc_cfg.delta, enc_cfg.j_max, enc_cfg.k_max, args.seed)
    encoder, losses = cl.train_encoder(pairs, windows, enc_cfg, seed=args.seed, scores=scores)
    encoder.save(args.out)
    print(f"trained encoder on {len(pairs)} pair sets; loss {losses[0]:.4f} -> {losses[-1]:.4f}"
          if losses else "no training epochs run")


def cmd_finetune(args):
    model = load_forecaster(args.model)
    windows = _windows(args.data, args.value_column, model.input_length, model.horizon, args.stride)
    train = TrainConfig(batch_size=args.batch_size, lr=args.lr)
    tuned = finetune(model.thaw(), windows, args.steps, train, args.seed)
    tuned.snapshot().save(args.out)
    print(f"fine-tuned for {args.steps} steps; saved to {args.out}")


def cmd_evaluate(args):
    model = load_forecaster(args.model)
    few = FewShotConfig(seed=args.seed)
    out = {}
    for path in args.data:
        sid = os.path.splitext(os.path.basename(path))[0]
        windows = rolling_windows(load_csv(path, args.value_column, id=sid),
                                  model.input_length, args.horizon, args.stride)
        if not windows:
            raise ConfigError(f"data: {path} too short for horizon {args.horizon}")
        out[sid] = evaluate(model, windows, args.protocol, few).to_dict()
    aggregate = float(np.mean([r["aggregate"] for r in out.values()]))
    doc = {"horizon": args.horizon, "protocol": args.protocol, "aggregate": aggregate,
           "targets": out}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(f"aggregate CV-RMSE {aggregate:.5f}")


def _load_model_arg(args):
    return load_forecaster(args.model) if args.model else None


def cmd_experiment(args):
    config = _experiment_config(args)
    report, _ = run_experiment(config, _load_model_arg(args))
    ok = [c for c in report["cells"] if c["status"] == "ok"]
    for row in sorted(report["summary"], key=lambda r: (r["horizon"], r["protocol"], r["strategy"])):
        print(f"h={row['horizon']:<4} {row['protocol']:<10} {row['strategy']:<10} "
              f"median CV-RMSE {row['median_aggregate']:.5f}  seeds {row['n_seeds']}")
    if config.output_dir:
        print(f"report written to {config.output_dir}")
    else:
        sys.stdout.write(report_json(report))
    if not ok:
        print("every cell failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_sweep(args):
    config = _experiment_config(args)
    rows, _ = sweep_finetune_size(config, args.fractions, _load_model_arg(args))
    for row in rows:
        cells = "  ".join(f"{k}={v:.5f}" for k, v in sorted(row["cells"].items()))
        print(f"fraction {row['fraction']:<5} {row['strategy']:<7} {cells}")
    if not any(row["cells"] for row in rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ccl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, horizon=False):
        sp.add_argument("--data", nargs="+", required=True, help="CSV files, one series each")
        sp.add_argument("--value-column", default="value")
        sp.add_argument("--stride", type=int, default=1)
        if horizon:
            sp.add_argument("--horizon", type=int, default=None)

    sp = sub.add_parser("gen-data", help="write synthetic buildings as CSV files")
    sp.add_argument("--config", required=True, help="generator family JSON (object or list)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--prefix", default="building-")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="pre-train the frozen reference forecaster")
    sp.add_argument("--config", required=True, help="experiment JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("measure-difficulty", help="CV-RMSE difficulty of every window")
    sp.add_argument("--model", required=True)
    data_args(sp, horizon=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_measure_difficulty)

    sp = sub.add_parser("train-encoder", help="train the contrastive encoder on real windows")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config", default=None, help="encoder settings JSON")
    data_args(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_encoder)

    sp = sub.add_parser("finetune", help="plain fine-tuning on a pool of CSV series")
    sp.add_argument("--model", required=True)
    data_args(sp)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="zero- or few-shot CV-RMSE on target series")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--value-column", default="value")
    sp.add_argument("--horizon", type=int, default=24)
    sp.add_argument("--protocol", choices=[p.value for p in Protocol], default="zero-shot")
    sp.add_argument("--stride", type=int, default=24)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("experiment", cmd_experiment, "run the full strategy grid"),
                                 ("sweep", cmd_sweep, "vary the fine-tuning pool size")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--model", default=None, help="frozen model checkpoint to reuse")
        seeds = sp.add_mutually_exclusive_group()
        seeds.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds")
        seeds.add_argument("--seed", type=int, default=None, help="run a single seed")
        sp.add_argument("--output-dir", dest="output_dir", default=None)
        sp.add_argument("--workers", type=int, default=None)
        if name == "sweep":
            sp.add_argument("--fractions", type=_fractions, default=[0.25, 0.5, 1.0])
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (ConfigError, FileNotFoundError, ForecasterError, cl.ContrastiveError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
