"""End-to-end experiment plumbing: simulate, train, evaluate, report.

The experiment config bundles the simulator, model, and training settings
plus the test-set layout, and is loadable from JSON (unknown keys rejected).
``run_experiment`` produces datasets, trains one fusion model per requested
normalization mode, scores the oracle one-best baseline and every model on
every test set, and writes a combined JSON report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .evaluation import evaluate_fusion, evaluate_oracle
from .model import (FusionModel, ModelConfig, forward_with_attention,
                    init_model, save_model)
from .simulator import SimConfig, SyntheticDataset, generate, write_dataset
from .training import train

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training-loop hyperparameters."""

    epochs: int = 200
    batch_speakers: int = 32
    base_lr: float = 1e-3
    max_per_speaker: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything one reproducible simulate/train/eval run needs."""

    simulator: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = ("softmax", "sparsemax")
    test_channels: tuple[int, ...] = (20, 30, 40)
    test_speakers: int = 30
    test_utterances_per_speaker: int = 6
    test_seed: int = 1

    def __post_init__(self):
        if self.simulator.d_in != self.model.d_in:
            raise ConfigError(
                f"simulator d_in {self.simulator.d_in} != model d_in {self.model.d_in}")
        for m in self.modes:
            if m not in ("softmax", "sparsemax"):
                raise ConfigError(f"unknown mode {m!r}")
        if not self.test_channels:
            raise ConfigError("at least one test channel count is required")

    def to_dict(self) -> dict:
        return {
            "simulator": self.simulator.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "modes": list(self.modes),
            "test_channels": list(self.test_channels),
            "test_speakers": self.test_speakers,
            "test_utterances_per_speaker": self.test_utterances_per_speaker,
            "test_seed": self.test_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        kwargs: dict = {}
        if "simulator" in d:
            kwargs["simulator"] = SimConfig.from_dict(d["simulator"])
        if "model" in d:
            kwargs["model"] = ModelConfig.from_dict(d["model"])
        if "training" in d:
            kwargs["training"] = TrainConfig.from_dict(d["training"])
        for name in ("modes", "test_channels"):
            if name in d:
                kwargs[name] = tuple(d[name])
        for name in ("test_speakers", "test_utterances_per_speaker", "test_seed"):
            if name in d:
                kwargs[name] = d[name]
        return cls(**kwargs)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def default_experiment_config() -> ExperimentConfig:
    """Desk-scale defaults: ~50 speakers, 20 channels, 25% noise channels."""
    sim = SimConfig(
        d_in=64,
        speakers=50,
        utterances_per_speaker=10,
        channels=20,
        crops_per_utterance=5,
        noise_channel_fraction=0.25,
        noise_scale=0.12,
        within_speaker_spread=0.35,
        crop_jitter=0.03,
        seed=7,
    )
    model = ModelConfig(d_in=64, width=64, heads=4, layers=4, ffn_hidden=128)
    training = TrainConfig(epochs=40, batch_speakers=16, base_lr=1e-3, seed=11)
    return ExperimentConfig(simulator=sim, model=model, training=training,
                            test_speakers=30, test_utterances_per_speaker=6,
                            test_seed=23)


# ---------------------------------------------------------------------------
# attention inspection


def noise_channel_attention_stats(model: FusionModel, dataset: SyntheticDataset,
                                  crop: int = 0) -> dict:
    """How the final attention block treats noise-dominated channels.

    An utterance counts as "suppressed" when every noise channel receives an
    all-zero attention column in at least one head of the final block.
    Also counts bitwise-zero entries in the noise columns across all heads.
    """
    considered = 0
    suppressed = 0
    zero_entries = 0
    total_entries = 0
    for utt in dataset.utterances:
        noise_idx = np.flatnonzero(utt.noise_mask)
        if noise_idx.size == 0:
            continue
        considered += 1
        _, trace = forward_with_attention(model, utt.channel_matrix(crop))
        final_block = trace[-1]
        ok = True
        for c in noise_idx:
            cols = [head[:, c] for head in final_block]
            zero_entries += int(sum((col == 0.0).sum() for col in cols))
            total_entries += int(sum(col.size for col in cols))
            if not any((col == 0.0).all() for col in cols):
                ok = False
        if ok:
            suppressed += 1
    return {
        "utterances_with_noise_channels": considered,
        "suppressed_utterances": suppressed,
        "suppressed_fraction": suppressed / considered if considered else float("nan"),
        "zero_weight_entries": zero_entries,
        "noise_weight_entries": total_entries,
    }


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    eers: dict          # system name -> {channel count -> eer}
    thresholds: dict    # system name -> {channel count -> threshold}
    attention_stats: dict   # mode -> stats dict (on the first test set)
    histories: dict     # mode -> training history
    checkpoints: dict   # mode -> path
    report_path: str


def _test_config(cfg: ExperimentConfig, channels: int) -> SimConfig:
    return replace(cfg.simulator, channels=channels, speakers=cfg.test_speakers,
                   utterances_per_speaker=cfg.test_utterances_per_speaker,
                   seed=cfg.test_seed)


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1,
                   write_datasets: bool = True) -> ExperimentResult:
    os.makedirs(out_dir, exist_ok=True)

    logger.info("generating training data (%d speakers)", cfg.simulator.speakers)
    train_set = generate(cfg.simulator)
    if write_datasets:
        write_dataset(train_set, os.path.join(out_dir, "train.afds"))
    test_sets: dict[int, SyntheticDataset] = {}
    for c in cfg.test_channels:
        test_sets[c] = generate(_test_config(cfg, c))
        if write_datasets:
            write_dataset(test_sets[c], os.path.join(out_dir, f"test_{c}ch.afds"))

    eers: dict[str, dict[int, float]] = {"oracle-one-best": {}}
    thresholds: dict[str, dict[int, float]] = {"oracle-one-best": {}}
    for c, ds in test_sets.items():
        report = evaluate_oracle(ds, threads=threads)
        eers["oracle-one-best"][c] = report.eer
        thresholds["oracle-one-best"][c] = report.eer_threshold
        logger.info("oracle one-best %d-ch EER %.4f", c, report.eer)

    histories: dict[str, list] = {}
    checkpoints: dict[str, str] = {}
    attention_stats: dict[str, dict] = {}
    models: dict[str, FusionModel] = {}
    for mode in cfg.modes:
        model_cfg = replace(cfg.model, mode=mode)
        model = init_model(model_cfg, cfg.training.seed)
        log_path = os.path.join(out_dir, f"train_{mode}.log.jsonl")
        with open(log_path, "w", encoding="utf-8") as log_stream:
            histories[mode] = train(
                model, train_set, cfg.training.epochs, cfg.training.seed,
                batch_speakers=cfg.training.batch_speakers,
                base_lr=cfg.training.base_lr,
                max_per_speaker=cfg.training.max_per_speaker,
                log_stream=log_stream)
        ckpt = os.path.join(out_dir, f"fusion_{mode}.ckpt")
        save_model(model, ckpt)
        checkpoints[mode] = ckpt
        models[mode] = model

        name = f"fusion-{mode}"
        eers[name] = {}
        thresholds[name] = {}
        for c, ds in test_sets.items():
            report = evaluate_fusion(model, ds, threads=threads)
            eers[name][c] = report.eer
            thresholds[name][c] = report.eer_threshold
            logger.info("%s %d-ch EER %.4f", name, c, report.eer)
        first_c = cfg.test_channels[0]
        attention_stats[mode] = noise_channel_attention_stats(model, test_sets[first_c])

    report_path = os.path.join(out_dir, "report.json")
    write_report(report_path, cfg, eers, thresholds, test_sets, attention_stats)
    return ExperimentResult(config=cfg, eers=eers, thresholds=thresholds,
                            attention_stats=attention_stats, histories=histories,
                            checkpoints=checkpoints, report_path=report_path)


def write_report(path, cfg: ExperimentConfig, eers: dict, thresholds: dict,
                 test_sets: dict[int, SyntheticDataset],
                 attention_stats: dict | None = None) -> None:
    counts = {}
    for c, ds in test_sets.items():
        per_speaker: dict[int, int] = {}
        for u in ds.utterances:
            per_speaker[u.speaker_id] = per_speaker.get(u.speaker_id, 0) + 1
        from .evaluation import expected_trial_counts

        total, pos, neg = expected_trial_counts(per_speaker)
        counts[str(c)] = {"total": total, "positive": pos, "negative": neg}
    comparison = []
    for system in sorted(eers):
        for c in sorted(eers[system]):
            comparison.append({
                "system": system,
                "channels": c,
                "eer": eers[system][c],
                "eer_threshold": thresholds[system][c],
            })
    report = {
        "config_digest": cfg.digest(),
        "trial_counts": counts,
        "comparison": comparison,
    }
    if attention_stats:
        report["noise_channel_attention"] = attention_stats
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
