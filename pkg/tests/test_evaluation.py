"""Trial construction, scoring, EER estimation, and the oracle baseline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adhoc_fusion import (ContractError, NumericError, SimConfig,
                          SyntheticUtterance, Trial, build_trials, compute_eer,
                          evaluate_oracle, expected_trial_counts, generate,
                          oracle_one_best, trial_score)


def eer_sweep_oracle(scores, labels):
    """Independent naive estimator: counting loops over midpoint thresholds."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    pos = sorted(s for s, l in zip(scores, labels) if l)
    neg = sorted(s for s, l in zip(scores, labels) if not l)
    distinct = sorted(set(scores))
    thresholds = [distinct[0] - 1.0]
    for a, b in zip(distinct, distinct[1:]):
        thresholds.append((a + b) / 2.0)
    thresholds.append(distinct[-1] + 1.0)

    points = []
    for t in thresholds:
        far = sum(1 for s in neg if s >= t) / len(neg)
        frr = sum(1 for s in pos if s < t) / len(pos)
        points.append((far, frr))
    for i in range(1, len(points)):
        d0 = points[i - 1][1] - points[i - 1][0]
        d1 = points[i][1] - points[i][0]
        if d1 >= 0.0:
            alpha = 0.0 if d1 == d0 else d0 / (d0 - d1)
            far0, far1 = points[i - 1][0], points[i][0]
            return far0 + alpha * (far1 - far0)
    raise AssertionError("no crossing found")


def make_utterance(speaker, uid, embeddings, distances, snrs=None, mask=None):
    emb = np.asarray(embeddings, dtype=np.float32)
    c = emb.shape[0]
    return SyntheticUtterance(
        speaker_id=speaker, utterance_id=uid, embeddings=emb,
        distances=np.asarray(distances, dtype=np.float32),
        snrs_db=np.asarray(snrs if snrs is not None else np.zeros(c), dtype=np.float32),
        noise_mask=np.asarray(mask if mask is not None else np.zeros(c, dtype=bool)))


# ---------------------------------------------------------------------------
# trial_score


def test_identical_single_crops_score_one(rng):
    v = rng.standard_normal((1, 8))
    assert trial_score(v, 2.5 * v) == pytest.approx(1.0)


def test_orthogonal_single_crops_score_zero():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    assert trial_score(a, b) == pytest.approx(0.0, abs=1e-12)


def test_two_by_two_crops_mean():
    # pairwise cosines {1, 0, 0, 1} -> mean 0.5
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert trial_score(a, a) == pytest.approx(0.5)


def test_trial_score_is_symmetric(rng):
    a = rng.standard_normal((5, 6))
    b = rng.standard_normal((3, 6))
    assert trial_score(a, b) == pytest.approx(trial_score(b, a))


def test_trial_score_guards():
    with pytest.raises(ContractError):
        trial_score(np.zeros((0, 4)), np.ones((2, 4)))
    with pytest.raises(NumericError):
        trial_score(np.zeros((1, 4)), np.ones((1, 4)))


# ---------------------------------------------------------------------------
# compute_eer


def test_eer_perfect_separation():
    eer, _ = compute_eer([0.9, 0.8, 0.1, 0.2], [True, True, False, False])
    assert eer == pytest.approx(0.0, abs=1e-12)


def test_eer_worked_quarter_example():
    scores = [0.9, 0.8, 0.7, 0.3, 0.6, 0.2, 0.1, 0.05]
    labels = [True, True, True, True, False, False, False, False]
    eer, threshold = compute_eer(scores, labels)
    assert eer == pytest.approx(0.25, abs=1e-9)
    assert eer == pytest.approx(eer_sweep_oracle(scores, labels), abs=1e-12)


def test_eer_fully_inverted():
    eer, _ = compute_eer([0.1, 0.9], [True, False])
    assert eer == pytest.approx(1.0, abs=1e-12)


def test_eer_single_class_rejected():
    with pytest.raises(ContractError):
        compute_eer([0.5, 0.6], [True, True])
    with pytest.raises(ContractError):
        compute_eer([0.5, 0.6], [False, False])


def test_eer_matches_sweep_oracle_on_random_sets(rng):
    for trial in range(100):
        n_pos = int(rng.integers(1, 30))
        n_neg = int(rng.integers(1, 30))
        sep = rng.uniform(-0.5, 1.0)
        scores = np.concatenate([rng.normal(sep, 1.0, n_pos),
                                 rng.normal(0.0, 1.0, n_neg)])
        labels = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
        ours, _ = compute_eer(scores, labels)
        assert ours == pytest.approx(eer_sweep_oracle(scores, labels), abs=1e-9)


def test_eer_invariant_under_increasing_transform(rng):
    scores = rng.normal(0.0, 1.0, 60)
    labels = rng.random(60) < 0.4
    labels[0] = True
    labels[1] = False
    base, _ = compute_eer(scores, labels)
    for transform in (lambda s: 3.0 * s + 2.0, np.tanh, lambda s: s ** 3):
        eer, _ = compute_eer(transform(scores), labels)
        assert eer == pytest.approx(base, abs=1e-9)


def test_eer_negation_with_flipped_labels(rng):
    scores = rng.normal(0.0, 1.0, 80)
    labels = rng.random(80) < 0.5
    labels[0] = True
    labels[1] = False
    a, _ = compute_eer(scores, labels)
    b, _ = compute_eer(-scores, ~labels)
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100, allow_nan=False), st.booleans()),
                min_size=2, max_size=40))
def test_eer_stays_in_unit_interval(pairs):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    if not (any(labels) and not all(labels)):
        return
    eer, _ = compute_eer(scores, labels)
    assert 0.0 <= eer <= 1.0
    assert eer == pytest.approx(eer_sweep_oracle(scores, labels), abs=1e-9)


# ---------------------------------------------------------------------------
# trial construction


def four_utterances():
    e = np.ones((1, 4))
    return [make_utterance(s, i, e[None, :, :], [1.0])
            for i, s in enumerate([0, 0, 1, 1])]


def test_build_trials_counts():
    from adhoc_fusion import SyntheticDataset

    ds = SyntheticDataset(config=SimConfig(d_in=4, speakers=2,
                                           utterances_per_speaker=2, channels=1,
                                           crops_per_utterance=1),
                          utterances=four_utterances())
    trials = build_trials(ds)
    assert len(trials) == 6  # C(4, 2)
    assert sum(t.same_speaker for t in trials) == 2
    assert sum(not t.same_speaker for t in trials) == 4


def test_trial_rejects_self_pair():
    with pytest.raises(ContractError):
        Trial(enroll_id=3, test_id=3, same_speaker=True)


def test_expected_trial_counts_formula():
    total, pos, neg = expected_trial_counts({0: 2, 1: 2})
    assert (total, pos, neg) == (6, 2, 4)


def test_large_scale_trial_count_identity():
    # 3705 utterances pair up to C(3705, 2) trials without materializing them
    from math import comb

    per_speaker = {i: 5 for i in range(741)}  # 741 * 5 = 3705
    total, pos, neg = expected_trial_counts(per_speaker)
    assert total == comb(3705, 2) == 6_861_660
    assert pos == 741 * comb(5, 2)
    assert pos + neg == total


# ---------------------------------------------------------------------------
# oracle one-best


def test_oracle_picks_minimum_distance_channel(rng):
    emb = rng.standard_normal((3, 2, 4)).astype(np.float32)
    utt = make_utterance(0, 0, emb, [3.0, 1.0, 2.0])
    np.testing.assert_allclose(oracle_one_best(utt), emb[1].astype(np.float64))


def test_oracle_tie_breaks_to_lowest_index(rng):
    emb = rng.standard_normal((3, 2, 4)).astype(np.float32)
    utt = make_utterance(0, 0, emb, [2.0, 2.0, 2.0])
    np.testing.assert_allclose(oracle_one_best(utt), emb[0].astype(np.float64))


def test_oracle_rejects_missing_distances(rng):
    emb = rng.standard_normal((3, 2, 4)).astype(np.float32)
    utt = make_utterance(0, 0, emb, [1.0, 2.0, 3.0])
    utt.distances = np.zeros((0,), dtype=np.float32)
    with pytest.raises(ContractError):
        oracle_one_best(utt)


def test_oracle_channel_has_highest_snr_without_noise_channels():
    # with monotone attenuation and no noise-dominated channels the closest
    # channel is also the best-SNR channel
    cfg = SimConfig(d_in=16, speakers=2, utterances_per_speaker=3, channels=8,
                    crops_per_utterance=2, noise_channel_fraction=0.0, seed=3)
    ds = generate(cfg)
    for utt in ds.utterances:
        assert np.argmin(utt.distances) == np.argmax(utt.snrs_db)


def test_evaluate_oracle_on_clean_data_is_near_zero():
    cfg = SimConfig(d_in=32, speakers=4, utterances_per_speaker=4, channels=4,
                    crops_per_utterance=2, noise_channel_fraction=0.0,
                    noise_scale=0.0, crop_jitter=0.0, seed=5)
    report = evaluate_oracle(generate(cfg))
    assert report.eer == pytest.approx(0.0, abs=1e-9)
    assert report.n_positive == 4 * 6
    assert report.n_negative == len(report.scores) - report.n_positive
