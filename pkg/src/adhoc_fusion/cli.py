"""Command-line front door: simulate, train, eval, sparsemax, experiment.

Every command is deterministic given its config and seed. Set
ADHOC_FUSION_LOG={error|warn|info|debug} to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .errors import (CheckpointError, ConfigError, ContractError, DatasetError,
                     DivergenceError, GenerationError, NumericError,
                     OptimizerError, TapeError)
from .evaluation import evaluate_fusion, evaluate_oracle
from .experiment import (ExperimentConfig, default_experiment_config,
                         load_experiment_config, run_experiment, write_report)
from .model import init_model, load_model, save_model
from .simulator import generate, read_dataset, write_dataset
from .tape import sparsemax_rows
from .training import train

logger = logging.getLogger("adhoc_fusion")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "warning": logging.WARNING, "info": logging.INFO,
               "debug": logging.DEBUG}


def _configure_logging() -> None:
    level = os.environ.get("ADHOC_FUSION_LOG", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_experiment_config(args.config)
    else:
        cfg = default_experiment_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg,
                      simulator=replace(cfg.simulator, seed=args.seed),
                      training=replace(cfg.training, seed=args.seed))
    if getattr(args, "mode", None):
        cfg = replace(cfg, model=replace(cfg.model, mode=args.mode),
                      modes=(args.mode,))
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    sim = cfg.simulator
    if args.channels is not None:
        sim = replace(sim, channels=args.channels)
    if args.speakers is not None:
        sim = replace(sim, speakers=args.speakers)
    if args.utterances is not None:
        sim = replace(sim, utterances_per_speaker=args.utterances)
    dataset = generate(sim)
    out = args.out or "dataset.afds"
    n_bytes = write_dataset(dataset, out)
    lo, hi = sim.channel_range()
    channels = str(lo) if lo == hi else f"{lo}..{hi}"
    print(f"wrote {out}: {sim.speakers} speakers, {len(dataset)} utterances, "
          f"{channels} channels, {n_bytes} bytes")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.data)
    if args.resume:
        model = load_model(args.resume)
        if args.mode and model.config.mode != args.mode:
            raise ConfigError(
                f"checkpoint was trained in {model.config.mode} mode, not {args.mode}")
    else:
        if dataset.config.d_in != cfg.model.d_in:
            raise ConfigError(
                f"dataset embedding dim {dataset.config.d_in} != model d_in "
                f"{cfg.model.d_in}; adjust the model config")
        model = init_model(cfg.model, cfg.training.seed)
    out = args.out or f"fusion_{model.config.mode}.ckpt"
    epochs = args.epochs if args.epochs is not None else cfg.training.epochs
    log_path = out + ".log.jsonl"
    try:
        with open(log_path, "a" if args.resume else "w", encoding="utf-8") as stream:
            history = train(model, dataset, epochs, cfg.training.seed,
                            batch_speakers=cfg.training.batch_speakers,
                            base_lr=cfg.training.base_lr,
                            max_per_speaker=cfg.training.max_per_speaker,
                            log_stream=stream)
    except DivergenceError as err:
        save_model(model, out)  # model was rolled back to the last good epoch
        print(f"error: {err}; last good checkpoint kept at {out}", file=sys.stderr)
        return 1
    save_model(model, out)
    last = history[-1]["loss"] if history else float("nan")
    print(f"wrote {out}: {model.epochs_trained} epochs total, final loss {last:.6f}, "
          f"log at {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.data)
    if args.baseline == "oracle-one-best":
        system = "oracle-one-best"
        report = evaluate_oracle(dataset, threads=args.threads)
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required when evaluating the fusion system")
        model = load_model(args.ckpt)
        system = f"fusion-{model.config.mode}"
        report = evaluate_fusion(model, dataset, threads=args.threads)
    out = args.out or "report.json"
    channels = dataset.config.channel_range()[0]
    write_report(out, cfg, {system: {channels: report.eer}},
                 {system: {channels: report.eer_threshold}},
                 {channels: dataset})
    print(f"{system}: EER {report.eer:.4f} at threshold {report.eer_threshold:.4f} "
          f"({report.n_positive} positive / {report.n_negative} negative trials); "
          f"report at {out}")
    return 0


def cmd_sparsemax(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"could not parse values: {err}") from None
    if not values:
        raise ConfigError("need at least one value")
    out = sparsemax_rows(np.array([values]))[0]
    print(",".join(f"{v:.10g}" for v in out))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out or "experiment-out"
    result = run_experiment(cfg, out_dir, threads=args.threads)
    for system in sorted(result.eers):
        row = ", ".join(f"{c}-ch {eer:.4f}" for c, eer in sorted(result.eers[system].items()))
        print(f"{system}: {row}")
    print(f"report at {result.report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adhoc-fusion",
        description="Multi-channel embedding fusion for ad-hoc microphone arrays")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="experiment config JSON file")
        p.add_argument("--seed", type=int, help="override the config seeds")
        p.add_argument("--mode", choices=["softmax", "sparsemax"],
                       help="attention normalization mode")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for parallel sections")
        p.add_argument("--out", help="output path")

    p = sub.add_parser("simulate", help="generate a synthetic dataset file")
    common(p)
    p.add_argument("--channels", type=int, help="override channels per utterance")
    p.add_argument("--speakers", type=int, help="override speaker count")
    p.add_argument("--utterances", type=int, help="override utterances per speaker")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a fusion model on a dataset file")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (.afds)")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score trials and report EER")
    common(p)
    p.add_argument("--data", required=True, help="test dataset (.afds)")
    p.add_argument("--ckpt", help="fusion checkpoint (.ckpt)")
    p.add_argument("--baseline", choices=["fusion", "oracle-one-best"],
                   default="fusion")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sparsemax", help="print the sparsemax of a vector")
    p.add_argument("values", help="comma-separated real numbers")
    p.set_defaults(func=cmd_sparsemax)

    p = sub.add_parser("experiment",
                       help="chain simulate, train, and eval into one report")
    common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, NumericError, TapeError, CheckpointError,
            DatasetError, GenerationError, OptimizerError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
