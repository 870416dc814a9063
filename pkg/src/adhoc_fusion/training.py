"""Angular prototypical training of the fusion head on simulated array data.

Batches hold N distinct speakers with two utterances each (one support that
forms the prototype, one query). Scores are w * cos(query, prototype) + b and
the loss is softmax cross-entropy against the matching speaker. Adam with a
stepped learning-rate decay (5% every 10 epochs) drives the updates; the
cosine scale w is clamped positive after every step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (ContractError, DivergenceError, NumericError,
                     OptimizerError)
from .model import FusionModel, forward, restore_parameters, snapshot_parameters
from .simulator import SyntheticDataset, derive_seed
from .tape import (Tape, Tensor, backward, concat_rows, exp, log, matmul,
                   mean_rows, mul, sqrt, sub, sum_entries, transpose)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_DECAY = 0.95
LR_DECAY_EVERY = 10
LOSS_SCALE_MIN = 1e-6


@dataclass
class SpeakerGroup:
    speaker_id: int
    utterances: list[np.ndarray]   # M channel matrices, support(s) first, query last


@dataclass
class TrainBatch:
    """N speaker groups of M=2 utterances each (1 support + 1 query)."""

    groups: list[SpeakerGroup]

    def __post_init__(self):
        if len(self.groups) < 2:
            raise ContractError("a batch needs at least two speakers")
        ids = [g.speaker_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ContractError("speakers within a batch must be distinct")
        for g in self.groups:
            if len(g.utterances) != 2:
                raise ContractError("each speaker contributes exactly 2 utterances")

    @property
    def n_speakers(self) -> int:
        return len(self.groups)


def _row_normalized(x: Tensor) -> Tensor:
    sq = sum_entries(mul(x, x), axis=1)
    if (sq.data < 1e-24).any():
        raise NumericError("zero-norm embedding in cosine similarity")
    return x / sqrt(sq)


def loss_from_embeddings(queries: Tensor, prototypes: Tensor,
                         scale: Tensor, bias: Tensor) -> Tensor:
    """Cross-entropy over affine-scaled cosines; row j's target is column j."""
    n = queries.rows
    if prototypes.rows != n:
        raise ContractError("queries and prototypes must pair up one per speaker")
    qn = _row_normalized(queries)
    cn = _row_normalized(prototypes)
    scores = mul(matmul(qn, transpose(cn)), scale) + bias
    # detached per-row max keeps exp in range without touching gradients
    shift = Tensor(scores.data.max(axis=1, keepdims=True))
    lse = log(sum_entries(exp(sub(scores, shift)), axis=1)) + shift
    diag = sum_entries(mul(scores, Tensor(np.eye(n))), axis=1)
    return sum_entries(sub(lse, diag)) * (1.0 / n)


def angular_prototypical_loss(model: FusionModel, batch: TrainBatch) -> Tensor:
    """Loss for one batch; prototypes come from each speaker's support utterances."""
    if model.loss_scale.item() <= 0.0:
        raise ContractError("model loss_scale must be positive")
    queries, protos = [], []
    for group in batch.groups:
        embs = [forward(model, u) for u in group.utterances]
        queries.append(embs[-1])
        support = embs[:-1]
        if len(support) == 1:
            protos.append(support[0])
        else:
            protos.append(mean_rows(concat_rows(support)))
    return loss_from_embeddings(concat_rows(queries), concat_rows(protos),
                                model.loss_scale, model.loss_bias)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam accumulators plus the stepped learning-rate schedule."""

    base_lr: float = 1e-3
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def current_lr(self) -> float:
        return self.base_lr * LR_DECAY ** (self.epoch // LR_DECAY_EVERY)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: OptimizerState) -> None:
    """One Adam update over named parameters; missing grads count as zero."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr = state.current_lr()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name!r} "
                                f"shape {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if name == "loss_scale":
            new = np.maximum(new, LOSS_SCALE_MIN)
        p.assign(new)


# ---------------------------------------------------------------------------
# epoch sampling and the training loop


def sample_epoch(dataset: SyntheticDataset, seed: int, *,
                 batch_speakers: int = 32,
                 max_per_speaker: int = 100) -> list[TrainBatch]:
    """Deterministic batches for one epoch.

    Caps each speaker at ``max_per_speaker`` utterances, pairs them up
    (support, query), shuffles, and greedily packs batches with
    ``batch_speakers`` distinct speakers. Speakers with fewer than two
    utterances are skipped with a warning. A trailing batch keeps fewer
    speakers as long as at least two remain.
    """
    if batch_speakers < 2:
        raise ContractError("batch_speakers must be at least 2")
    rng = np.random.default_rng(seed)
    crops = dataset.config.crops_per_utterance

    pair_queues: dict[int, list[tuple]] = {}
    for spk, utts in sorted(dataset.by_speaker().items()):
        if len(utts) < 2:
            logger.warning("speaker %d has %d utterance(s); needs 2, skipping",
                           spk, len(utts))
            continue
        order = rng.permutation(len(utts))[:max_per_speaker]
        picked = [utts[i] for i in order]
        pairs = []
        for a, b in zip(picked[0::2], picked[1::2]):
            crop_a = int(rng.integers(crops))
            crop_b = int(rng.integers(crops))
            pairs.append((a.channel_matrix(crop_a), b.channel_matrix(crop_b)))
        if pairs:
            pair_queues[spk] = pairs

    batches: list[TrainBatch] = []
    speakers = list(pair_queues)
    while True:
        available = [s for s in speakers if pair_queues[s]]
        if len(available) < 2:
            break
        chosen = [available[i] for i in rng.permutation(len(available))[:batch_speakers]]
        groups = []
        for spk in sorted(chosen):
            support, query = pair_queues[spk].pop()
            groups.append(SpeakerGroup(spk, [support, query]))
        batches.append(TrainBatch(groups))
    return batches


def train(model: FusionModel, dataset: SyntheticDataset, epochs: int, seed: int, *,
          batch_speakers: int = 32, base_lr: float = 1e-3,
          max_per_speaker: int = 100, log_stream: IO[str] | None = None) -> list[dict]:
    """Train in place for ``epochs`` epochs; returns the per-epoch history.

    Deterministic given (model, dataset, epochs, seed). On a non-finite loss
    or gradient the model is rolled back to the end of the last completed
    epoch and a DivergenceError carrying that snapshot is raised.
    """
    if not dataset.utterances:
        raise ContractError("training dataset is empty")
    params = model.named_parameters()
    state = OptimizerState(base_lr=base_lr)
    history: list[dict] = []
    last_good = snapshot_parameters(model)
    start = model.epochs_trained

    for epoch in range(start, start + epochs):
        state.epoch = epoch
        t0 = time.monotonic()
        batches = sample_epoch(dataset, derive_seed(seed, 2, epoch),
                               batch_speakers=batch_speakers,
                               max_per_speaker=max_per_speaker)
        losses = []
        try:
            for batch in batches:
                model.zero_grad()
                with Tape():
                    loss = angular_prototypical_loss(model, batch)
                backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                adam_step(params, grads, state)
                losses.append(loss.item())
        except (NumericError, OptimizerError) as err:
            restore_parameters(model, last_good)
            raise DivergenceError(
                f"training diverged in epoch {epoch}: {err}",
                last_good=last_good, history=history) from err
        record = {
            "epoch": epoch,
            "lr": state.current_lr(),
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "wall_time_s": time.monotonic() - t0,
        }
        history.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            log_stream.flush()
        last_good = snapshot_parameters(model)
        model.epochs_trained = epoch + 1
        logger.info("epoch %d: lr=%.6g loss=%.6f", epoch, record["lr"], record["loss"])
    return history
