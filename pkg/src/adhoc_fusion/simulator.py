"""Synthetic ad-hoc array datasets in embedding space.

Stands in for a frozen single-channel front-end: each utterance gets a
direction on the unit sphere (speaker prototype plus within-speaker spread),
and each channel observes an attenuated copy of it plus channel noise.
Attenuation falls off with source distance as 1/(1+d) while the noise level
grows linearly with distance, so nearer microphones carry cleaner copies.
A configured fraction of channels are noise-dominated (SNR of -10 dB or
worse) regardless of where they sit. Crops are i.i.d. jitters around the
channel embedding. Generation is a pure function of the config, with
per-utterance streams derived through splitmix64.

Dataset files: magic "AFDS", version u32, length-prefixed JSON header
(config echo plus counts), then per-utterance records of speaker id u32,
utterance id u32, C u16, distances C f32, SNRs C f32, noise mask C u8,
and embeddings C x crops x d_in little-endian f32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DatasetError, GenerationError

DATASET_MAGIC = b"AFDS"
DATASET_VERSION = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, advanced state)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def derive_seed(seed: int, *path: int) -> int:
    """Deterministically derive a child seed from a root seed and index path."""
    s = seed & _MASK64
    for p in path:
        s ^= ((p + 1) * _GOLDEN) & _MASK64
        s, _ = splitmix64(s)
    return s


@dataclass
class SimConfig:
    """Knobs of the synthetic array generator."""

    d_in: int = 512
    speakers: int = 50
    utterances_per_speaker: int = 10
    channels: int | tuple[int, int] = 20      # fixed count or inclusive range
    crops_per_utterance: int = 5
    room_extent: tuple[float, float] = (5.0, 25.0)   # length and width, meters
    room_height: tuple[float, float] = (2.7, 4.0)
    min_source_wall: float = 0.2
    min_source_mic: float = 0.3
    noise_channel_fraction: float = 0.0
    noise_channel_snr_db: tuple[float, float] = (-20.0, -10.0)
    t60_range: tuple[float, float] = (0.2, 0.4)      # metadata only
    noise_scale: float = 0.05        # channel noise std is noise_scale * distance
    within_speaker_spread: float = 0.35
    crop_jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_in", "speakers", "utterances_per_speaker", "crops_per_utterance"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        lo, hi = self.channel_range()
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid channel range {self.channels!r}")
        for name in ("room_extent", "room_height", "t60_range", "noise_channel_snr_db"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[1] < rng[0]:
                raise ConfigError(f"{name} must be a nonempty (lo, hi) range, got {rng!r}")
        if not 0.0 <= self.noise_channel_fraction <= 1.0:
            raise ConfigError("noise_channel_fraction must lie in [0, 1]")
        for name in ("min_source_wall", "min_source_mic", "noise_scale",
                     "within_speaker_spread", "crop_jitter"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be nonnegative")

    def channel_range(self) -> tuple[int, int]:
        if isinstance(self.channels, int):
            return self.channels, self.channels
        lo, hi = self.channels
        return int(lo), int(hi)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        return cls(**kwargs)


@dataclass
class SyntheticUtterance:
    """Per-channel embeddings plus the geometry that produced them."""

    speaker_id: int
    utterance_id: int
    embeddings: np.ndarray    # C x crops x d_in, float32
    distances: np.ndarray     # C, meters, float32
    snrs_db: np.ndarray       # C, float32
    noise_mask: np.ndarray    # C, bool

    @property
    def channels(self) -> int:
        return self.embeddings.shape[0]

    @property
    def crops(self) -> int:
        return self.embeddings.shape[1]

    def channel_matrix(self, crop: int) -> np.ndarray:
        """One crop's C x d_in matrix in float64 (model input)."""
        return self.embeddings[:, crop, :].astype(np.float64)


@dataclass
class SyntheticDataset:
    config: SimConfig
    utterances: list[SyntheticUtterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def by_speaker(self) -> dict[int, list[SyntheticUtterance]]:
        groups: dict[int, list[SyntheticUtterance]] = {}
        for utt in self.utterances:
            groups.setdefault(utt.speaker_id, []).append(utt)
        return groups


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    n = np.linalg.norm(v)
    while n < 1e-12:  # essentially unreachable, but keeps the math safe
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
    return v / n


def _place_source(rng: np.random.Generator, room: np.ndarray, margin: float) -> np.ndarray:
    lo = np.full(3, margin)
    hi = room - margin
    if (hi <= lo).any():
        raise GenerationError(f"room {room} too small for wall margin {margin}")
    return rng.uniform(lo, hi)


def _place_mics(rng: np.random.Generator, room: np.ndarray, source: np.ndarray,
                count: int, min_dist: float, max_tries: int = 200) -> np.ndarray:
    mics = np.empty((count, 3))
    for i in range(count):
        for _ in range(max_tries):
            pos = rng.uniform(np.zeros(3), room)
            if np.linalg.norm(pos - source) >= min_dist:
                mics[i] = pos
                break
        else:
            raise GenerationError(
                f"could not place microphone {i} at least {min_dist} m from the source")
    return mics


def _attenuation(dist: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + dist)


def generate(config: SimConfig) -> SyntheticDataset:
    """Build a dataset; bitwise deterministic for a given config."""
    config.validate()
    proto_rng = np.random.default_rng(derive_seed(config.seed, 0))
    prototypes = [_unit_vector(proto_rng, config.d_in) for _ in range(config.speakers)]

    c_lo, c_hi = config.channel_range()
    utterances: list[SyntheticUtterance] = []
    uid = 0
    for spk in range(config.speakers):
        for utt_idx in range(config.utterances_per_speaker):
            rng = np.random.default_rng(derive_seed(config.seed, 1, spk, utt_idx))
            direction = prototypes[spk] + config.within_speaker_spread * _unit_vector(rng, config.d_in)
            direction /= np.linalg.norm(direction)

            room = np.array([
                rng.uniform(*config.room_extent),
                rng.uniform(*config.room_extent),
                rng.uniform(*config.room_height),
            ])
            source = _place_source(rng, room, config.min_source_wall)
            n_ch = int(rng.integers(c_lo, c_hi + 1)) if c_hi > c_lo else c_lo
            mics = _place_mics(rng, room, source, n_ch, config.min_source_mic)
            dists = np.linalg.norm(mics - source, axis=1)
            rng.uniform(*config.t60_range)  # reverberation time: metadata draw only

            n_noise = int(round(config.noise_channel_fraction * n_ch))
            noise_mask = np.zeros(n_ch, dtype=bool)
            if n_noise:
                noise_mask[rng.permutation(n_ch)[:n_noise]] = True

            atten = _attenuation(dists)
            sigma = config.noise_scale * dists
            snrs = np.empty(n_ch)
            emb = np.empty((n_ch, config.crops_per_utterance, config.d_in), dtype=np.float32)
            for c in range(n_ch):
                if noise_mask[c]:
                    snrs[c] = rng.uniform(*config.noise_channel_snr_db)
                    sig = atten[c] * 10.0 ** (-snrs[c] / 20.0)
                else:
                    sig = sigma[c]
                    with np.errstate(divide="ignore"):
                        snrs[c] = 20.0 * np.log10(atten[c] / sig) if sig > 0 else np.inf
                base = atten[c] * direction + sig * _unit_vector(rng, config.d_in)
                jitter = config.crop_jitter * rng.standard_normal(
                    (config.crops_per_utterance, config.d_in)) / np.sqrt(config.d_in)
                emb[c] = (base[None, :] + jitter).astype(np.float32)

            utterances.append(SyntheticUtterance(
                speaker_id=spk,
                utterance_id=uid,
                embeddings=emb,
                distances=dists.astype(np.float32),
                snrs_db=np.clip(snrs, -1e30, 1e30).astype(np.float32),
                noise_mask=noise_mask,
            ))
            uid += 1
    return SyntheticDataset(config=config, utterances=utterances)


# ---------------------------------------------------------------------------
# dataset file round-trip


def write_dataset(dataset: SyntheticDataset, path) -> int:
    """Write the binary dataset file; returns bytes written."""
    header = {
        "config": dataset.config.to_dict(),
        "n_speakers": dataset.config.speakers,
        "n_utterances": len(dataset.utterances),
        "crops": dataset.config.crops_per_utterance,
        "d_in": dataset.config.d_in,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(DATASET_MAGIC)
        written += fh.write(struct.pack("<I", DATASET_VERSION))
        written += fh.write(struct.pack("<I", len(header_bytes)))
        written += fh.write(header_bytes)
        for utt in dataset.utterances:
            c = utt.channels
            written += fh.write(struct.pack("<IIH", utt.speaker_id, utt.utterance_id, c))
            written += fh.write(utt.distances.astype("<f4").tobytes())
            written += fh.write(utt.snrs_db.astype("<f4").tobytes())
            written += fh.write(utt.noise_mask.astype(np.uint8).tobytes())
            written += fh.write(utt.embeddings.astype("<f4").tobytes())
    return written


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetError(
            f"truncated dataset: wanted {n} bytes of {what} at offset {fh.tell() - len(buf)}, "
            f"got {len(buf)}")
    return buf


def read_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetError(f"bad magic {magic!r}, not a dataset file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != DATASET_VERSION:
            raise DatasetError(
                f"unsupported dataset version {version} (expected {DATASET_VERSION})")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
            config = SimConfig.from_dict(header["config"])
            n_utts = int(header["n_utterances"])
            crops = int(header["crops"])
            d_in = int(header["d_in"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError,
                ConfigError) as err:
            raise DatasetError(f"invalid dataset header: {err}") from None
        if crops != config.crops_per_utterance or d_in != config.d_in:
            raise DatasetError("dataset header counts disagree with its config echo")

        utterances = []
        for _ in range(n_utts):
            spk, uid, c = struct.unpack("<IIH", _read_exact(fh, 10, "record header"))
            if c < 1:
                raise DatasetError(f"record {uid}: channel count must be >= 1")
            dists = np.frombuffer(_read_exact(fh, 4 * c, "distances"), dtype="<f4")
            snrs = np.frombuffer(_read_exact(fh, 4 * c, "snrs"), dtype="<f4")
            mask = np.frombuffer(_read_exact(fh, c, "noise mask"), dtype=np.uint8)
            emb = np.frombuffer(_read_exact(fh, 4 * c * crops * d_in, "embeddings"),
                                dtype="<f4").reshape(c, crops, d_in)
            utterances.append(SyntheticUtterance(
                speaker_id=int(spk), utterance_id=int(uid),
                embeddings=emb.copy(), distances=dists.copy(),
                snrs_db=snrs.copy(), noise_mask=mask.astype(bool)))
        if fh.read(1):
            raise DatasetError("trailing bytes after the final utterance record")
    return SyntheticDataset(config=config, utterances=utterances)
