"""Trial scoring and equal-error-rate computation.

Every unordered pair of test utterances forms a trial. Each side contributes
one embedding per crop; the trial score is the mean cosine similarity over
the full crop cross product. The EER estimator sweeps the thresholds midway
between consecutive distinct scores (plus outer sentinels), where the
false-accept and false-reject rates are exactly the ROC staircase vertices,
and linearly interpolates the crossing.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .model import FusionModel, forward
from .simulator import SyntheticDataset, SyntheticUtterance


@dataclass(frozen=True)
class Trial:
    enroll_id: int
    test_id: int
    same_speaker: bool

    def __post_init__(self):
        if self.enroll_id == self.test_id:
            raise ContractError("a trial cannot pair an utterance with itself")


@dataclass
class TrialScoreReport:
    """Scores and labels for a trial list plus the EER operating point."""

    scores: np.ndarray
    labels: np.ndarray
    eer: float
    eer_threshold: float
    n_positive: int
    n_negative: int

    def __post_init__(self):
        if not 0.0 <= self.eer <= 1.0:
            raise ContractError(f"eer must lie in [0, 1], got {self.eer}")
        if self.n_positive != int(self.labels.sum()) or \
                self.n_negative != int((~self.labels).sum()):
            raise ContractError("trial counts do not match the label array")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise NumericError("zero-norm crop embedding")
    return x / norms


def trial_score(enroll_crops: np.ndarray, test_crops: np.ndarray) -> float:
    """Mean cosine similarity over all |A| x |B| crop combinations."""
    a = np.atleast_2d(np.asarray(enroll_crops, dtype=np.float64))
    b = np.atleast_2d(np.asarray(test_crops, dtype=np.float64))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ContractError("both crop lists must be nonempty")
    return float(np.mean(_normalize_rows(a) @ _normalize_rows(b).T))


def compute_eer(scores: Sequence[float], labels: Sequence[bool]) -> tuple[float, float]:
    """Equal error rate and its threshold for accept-if-score>=threshold.

    Requires at least one positive and one negative label. The returned EER
    is the common FAR = FRR value at the linearly interpolated crossing.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be matching 1-D sequences")
    if not np.isfinite(s).all():
        raise NumericError("scores must be finite")
    pos = s[y]
    neg = s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ContractError("EER needs at least one positive and one negative trial")

    distinct = np.unique(s)
    # midpoints between consecutive distinct scores, plus outer sentinels
    thresholds = np.concatenate((
        [distinct[0] - 1.0],
        (distinct[:-1] + distinct[1:]) / 2.0,
        [distinct[-1] + 1.0],
    ))
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    far = 1.0 - np.searchsorted(neg_sorted, thresholds, side="left") / neg.size
    frr = np.searchsorted(pos_sorted, thresholds, side="left") / pos.size

    diff = frr - far  # runs from -1 up to +1 as the threshold rises
    idx = int(np.argmax(diff >= 0.0))
    if idx == 0:
        return float(far[0]), float(thresholds[0])
    d0, d1 = diff[idx - 1], diff[idx]
    alpha = 0.0 if d1 == d0 else d0 / (d0 - d1)
    eer = far[idx - 1] + alpha * (far[idx] - far[idx - 1])
    threshold = thresholds[idx - 1] + alpha * (thresholds[idx] - thresholds[idx - 1])
    return float(eer), float(threshold)


def build_trials(dataset: SyntheticDataset) -> list[Trial]:
    """All unordered utterance pairs, labeled by speaker identity."""
    utts = dataset.utterances
    if len(utts) < 2:
        raise ContractError("trial construction needs at least two utterances")
    trials = []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            trials.append(Trial(
                enroll_id=utts[i].utterance_id,
                test_id=utts[j].utterance_id,
                same_speaker=utts[i].speaker_id == utts[j].speaker_id))
    return trials


def expected_trial_counts(per_speaker: dict[int, int]) -> tuple[int, int, int]:
    """(total, positive, negative) pair counts without materializing trials."""
    n = sum(per_speaker.values())
    total = comb(n, 2)
    positive = sum(comb(k, 2) for k in per_speaker.values())
    return total, positive, total - positive


def oracle_one_best(utterance: SyntheticUtterance) -> np.ndarray:
    """Crop embeddings of the channel physically closest to the source.

    Ties break toward the lowest channel index. Returns a crops x d_in
    float64 matrix.
    """
    d = np.asarray(utterance.distances)
    if d.ndim != 1 or d.size != utterance.channels or d.size == 0:
        raise ContractError("utterance lacks usable per-channel distances")
    best = int(np.argmin(d))  # argmin returns the first minimum: lowest index
    return utterance.embeddings[best].astype(np.float64)


def fused_crop_embeddings(model: FusionModel, utterance: SyntheticUtterance) -> np.ndarray:
    """One fused embedding per crop: crops x E float64."""
    rows = [forward(model, utterance.channel_matrix(r)).data[0]
            for r in range(utterance.crops)]
    return np.vstack(rows)


def embed_dataset(embed: Callable[[SyntheticUtterance], np.ndarray],
                  dataset: SyntheticDataset, threads: int = 1) -> dict[int, np.ndarray]:
    """Map utterance id -> crop embedding matrix, optionally in parallel."""
    utts = dataset.utterances
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(embed, utts))
    else:
        results = [embed(u) for u in utts]
    return {u.utterance_id: r for u, r in zip(utts, results)}


def score_trials(trials: Sequence[Trial],
                 embeddings: dict[int, np.ndarray]) -> TrialScoreReport:
    """Score a trial list against precomputed crop embeddings."""
    normalized = {uid: _normalize_rows(np.asarray(e, dtype=np.float64))
                  for uid, e in embeddings.items()}
    scores = np.empty(len(trials))
    labels = np.empty(len(trials), dtype=bool)
    for i, t in enumerate(trials):
        try:
            a = normalized[t.enroll_id]
            b = normalized[t.test_id]
        except KeyError as err:
            raise ContractError(f"trial references unknown utterance {err}") from None
        scores[i] = float(np.mean(a @ b.T))
        labels[i] = t.same_speaker
    eer, threshold = compute_eer(scores, labels)
    return TrialScoreReport(scores=scores, labels=labels, eer=eer,
                            eer_threshold=threshold,
                            n_positive=int(labels.sum()),
                            n_negative=int((~labels).sum()))


def evaluate_fusion(model: FusionModel, dataset: SyntheticDataset,
                    threads: int = 1) -> TrialScoreReport:
    trials = build_trials(dataset)
    emb = embed_dataset(lambda u: fused_crop_embeddings(model, u), dataset, threads)
    return score_trials(trials, emb)


def evaluate_oracle(dataset: SyntheticDataset, threads: int = 1) -> TrialScoreReport:
    trials = build_trials(dataset)
    emb = embed_dataset(oracle_one_best, dataset, threads)
    return score_trials(trials, emb)
