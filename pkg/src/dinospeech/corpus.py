"""Utterance containers, synthetic oracle corpora, multi-crop views and augmentation.

Features are treated as log-power values (log-mel or look-alikes), so additive
noise is mixed in the power domain and gain is an additive log offset.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError


@dataclass(frozen=True)
class Utterance:
    id: str
    frames: np.ndarray  # (T, F)
    speaker_id: str | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DataError(f"utterance {self.id!r}: frames must be a non-empty T x F matrix")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"utterance {self.id!r}: non-finite feature values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    feature_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        utts = tuple(self.utterances)
        if not utts:
            raise DataError("corpus is empty")
        ids = [u.id for u in utts]
        if len(set(ids)) != len(ids):
            raise DataError("corpus has duplicate utterance ids")
        for u in utts:
            if u.frames.shape[1] != self.feature_dim:
                raise DataError(
                    f"utterance {u.id!r} has {u.frames.shape[1]} feature dims, corpus expects {self.feature_dim}"
                )
        object.__setattr__(self, "utterances", utts)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def speakers(self) -> list[str | None]:
        return [u.speaker_id for u in self.utterances]

    def without_labels(self) -> "Corpus":
        """Same utterances with the hidden speaker identity removed."""
        return Corpus(
            tuple(Utterance(u.id, u.frames) for u in self.utterances), self.feature_dim, dict(self.meta)
        )


# ----------------------------------------------------------------------------
# Synthetic corpus
# ----------------------------------------------------------------------------


def spectral_basis(n_dims: int, rank: int) -> np.ndarray:
    """First ``rank`` DCT-II vectors over ``n_dims`` bins; row 0 is constant (level).

    Smooth offsets along these rows model channel/room colouring in the log
    spectral domain.
    """
    f = np.arange(n_dims)
    return np.stack([np.cos(np.pi * k * (f + 0.5) / n_dims) for k in range(rank)]) if rank else np.zeros((0, n_dims))


@dataclass(frozen=True)
class SyntheticConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 20
    frames_per_utt: int = 300
    feature_dim: int = 24
    speaker_scale: float = 1.0
    channel_scale: float = 0.1
    frame_noise_scale: float = 0.3
    drift_scale: float = 0.3
    # Per-utterance smooth spectral colouring (recording channel); 0 disables it.
    session_scale: float = 0.0
    session_rank: int = 4
    # Speaker means live in a shared random subspace of this rank; 0 uses all dimensions.
    speaker_rank: int = 0
    speaker_basis_seed: int = 0

    def validate(self) -> None:
        for name in ("n_speakers", "utts_per_speaker", "frames_per_utt", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("speaker_scale", "channel_scale", "frame_noise_scale", "drift_scale", "session_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.session_rank <= self.feature_dim:
            raise ConfigError("session_rank must lie in [0, feature_dim]")
        if not 0 <= self.speaker_rank <= self.feature_dim:
            raise ConfigError("speaker_rank must lie in [0, feature_dim]")


def speaker_basis(cfg: SyntheticConfig) -> np.ndarray:
    """Orthonormal rows spanning the speaker subspace.

    Depends only on the dimensions and ``speaker_basis_seed`` so corpora drawn
    with different seeds share it (held-out speakers come from the same space).
    """
    F = cfg.feature_dim
    r = cfg.speaker_rank or F
    if r == F:
        return np.eye(F)
    g = np.random.default_rng([cfg.speaker_basis_seed, F, r])
    q, _ = np.linalg.qr(g.normal(size=(F, r)))
    return q.T


def gen_synthetic_corpus(cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> Corpus:
    """Speaker-structured random features with known identities.

    Frame ``t`` of an utterance by speaker ``s`` is
    ``v_s + c_u + k_u + drift_u(t) + noise`` with ``v_s ~ N(0, speaker_scale^2 I)``
    (restricted to a shared subspace when ``speaker_rank`` is set, with the
    per-dimension variance kept), ``c_u ~ N(0, channel_scale^2 I)``, a smooth
    session colouring ``k_u`` of scale ``session_scale`` and a slow
    per-dimension sinusoid whose period lies between half and twice the
    utterance length.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    F, T = cfg.feature_dim, cfg.frames_per_utt
    t = np.arange(T)[:, None]
    basis = spectral_basis(F, cfg.session_rank)
    spk_basis = speaker_basis(cfg)
    spk_gain = cfg.speaker_scale * np.sqrt(F / spk_basis.shape[0])
    utts = []
    for s in range(cfg.n_speakers):
        v = spk_gain * (rng.normal(size=spk_basis.shape[0]) @ spk_basis)
        for _ in range(cfg.utts_per_speaker):
            c = rng.normal(0.0, cfg.channel_scale, F)
            period = rng.uniform(0.5, 2.0) * T
            phase = rng.uniform(0.0, 2 * np.pi, F)
            drift = cfg.drift_scale * np.sin(2 * np.pi * t / period + phase)
            session = cfg.session_scale * (rng.normal(size=basis.shape[0]) @ basis)
            noise = rng.normal(0.0, cfg.frame_noise_scale, (T, F))
            frames = v + c + session + drift + noise
            utts.append(Utterance(f"u{len(utts):05d}", frames, f"spk{s:04d}"))
    return Corpus(tuple(utts), F, {"generator": asdict(cfg), "seed": int(seed)})


# ----------------------------------------------------------------------------
# FEAT1 files and corpus directories
# ----------------------------------------------------------------------------

FEAT_MAGIC = "FEAT1"


def write_feat(path: str | Path, utt: Utterance) -> None:
    if any(c.isspace() for c in utt.id):
        raise DataError(f"utterance id {utt.id!r} contains whitespace")
    T, F = utt.frames.shape
    with open(path, "wb") as fh:
        fh.write(f"{FEAT_MAGIC} {utt.id} {T} {F}\n".encode("ascii"))
        fh.write(utt.frames.astype("<f4").tobytes())


def read_feat(path: str | Path, speaker_id: str | None = None) -> Utterance:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != FEAT_MAGIC:
        raise FormatError(f"{path}: bad FEAT1 header {header[:60]!r}")
    try:
        T, F = int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad FEAT1 dimensions") from exc
    if len(payload) != 4 * T * F:
        raise FormatError(f"{path}: expected {4 * T * F} payload bytes, found {len(payload)}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(T, F)
    return Utterance(parts[1], frames, speaker_id)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write ``feats/<id>.feat`` files plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus:
        rel = f"feats/{u.id}.feat"
        write_feat(out / rel, u)
        lines.append(f"{u.id}\t{rel}\t{u.speaker_id if u.speaker_id is not None else '-'}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def load_corpus(corpus_dir: str | Path, with_labels: bool = True) -> Corpus:
    root = Path(corpus_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"{root}: no manifest.tsv")
    utts = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise FormatError(f"{manifest}:{lineno}: expected id<TAB>path<TAB>speaker")
        uid, rel, spk = cols
        utt = read_feat(root / rel, None if (spk == "-" or not with_labels) else spk)
        if utt.id != uid:
            raise FormatError(f"{manifest}:{lineno}: id {uid!r} but file header says {utt.id!r}")
        utts.append(utt)
    if not utts:
        raise DataError(f"{manifest}: corpus is empty")
    return Corpus(tuple(utts), utts[0].frames.shape[1], {"source": str(root)})


# ----------------------------------------------------------------------------
# Multi-crop
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CropConfig:
    n_short: int = 4
    n_long: int = 2
    len_short: int = 200
    len_long: int = 400

    def validate(self) -> None:
        if self.len_short >= self.len_long:
            raise ConfigError("len_short must be smaller than len_long")
        if self.len_short < 1 or self.n_long < 1 or self.n_short < 0:
            raise ConfigError("crop counts/lengths out of range")


@dataclass(frozen=True)
class CropSet:
    longs: np.ndarray  # (n_long, len_long, F)
    shorts: np.ndarray  # (n_short, len_short, F)


def crop(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous window at a uniform random start; short inputs are wrapped cyclically."""
    T = frames.shape[0]
    if T == 0:
        raise DataError("cannot crop an empty utterance")
    if T >= length:
        start = int(rng.integers(0, T - length + 1))
        return frames[start : start + length]
    start = int(rng.integers(0, T))
    return frames[(start + np.arange(length)) % T]


def multi_crop(utt: Utterance, cfg: CropConfig, rng: np.random.Generator) -> CropSet:
    cfg.validate()
    frames = utt.frames
    longs = np.stack([crop(frames, cfg.len_long, rng) for _ in range(cfg.n_long)])
    if cfg.n_short:
        shorts = np.stack([crop(frames, cfg.len_short, rng) for _ in range(cfg.n_short)])
    else:
        shorts = np.zeros((0, cfg.len_short, frames.shape[1]), dtype=frames.dtype)
    return CropSet(longs, shorts)


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------

NOISE_KINDS = ("white", "pink", "babble-surrogate", "bank")


@dataclass(frozen=True)
class AugmentPolicy:
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    gain_db_range: tuple[float, float] = (-6.0, 6.0)
    time_mask_max_frames: int = 20
    noise_kind: str = "white"
    noise: bool = True
    gain: bool = True
    time_mask: bool = True
    # Random smooth spectral colouring per view (log-domain stand-in for room/channel effects).
    colour: bool = False
    colour_scale: float = 0.0
    colour_rank: int = 4
    babble_speakers: int = 5

    def validate(self, len_short: int | None = None) -> None:
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ConfigError("snr_db_range must be ordered")
        lo, hi = self.gain_db_range
        if lo > hi:
            raise ConfigError("gain_db_range must be ordered")
        if self.time_mask_max_frames < 0:
            raise ConfigError("time_mask_max_frames must be >= 0")
        if len_short is not None and self.time_mask and self.time_mask_max_frames >= len_short:
            raise ConfigError("time_mask_max_frames must be smaller than the short crop length")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.colour_scale < 0 or self.colour_rank < 0:
            raise ConfigError("colour_scale and colour_rank must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(noise=False, gain=False, time_mask=False, colour=False)


DB_TO_LOG = math.log(10.0) / 10.0


def noise_power_frames(
    shape: tuple[int, int],
    kind: str,
    rng: np.random.Generator,
    bank: Sequence[np.ndarray] | None = None,
    n_babble: int = 5,
) -> np.ndarray:
    """Linear-power noise frames with the requested spectral character."""
    T, F = shape
    if kind == "white":
        return rng.exponential(1.0, (T, F))
    if kind == "pink":
        return rng.exponential(1.0, (T, F)) / (np.arange(F) + 1.0)
    if not bank:
        raise DataError(f"noise kind {kind!r} needs a non-empty noise bank")
    picks = [bank[int(i)] for i in rng.integers(0, len(bank), n_babble if kind == "babble-surrogate" else 1)]
    return sum(np.exp(crop(np.asarray(p, dtype=np.float64), T, rng)) for p in picks)


def add_noise(segment: np.ndarray, noise_power: np.ndarray, snr_db: float) -> np.ndarray:
    """Mix noise in the linear power domain at ``snr_db`` relative to the segment power."""
    sig = np.exp(segment.astype(np.float64))
    scale = sig.mean() / (noise_power.mean() * 10.0 ** (snr_db / 10.0))
    return np.log(sig + scale * noise_power)


def augment(
    segment: np.ndarray,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    noise_bank: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Noise, colouring, gain and time masking, each with an independent draw."""
    x = np.asarray(segment)
    if x.size == 0:
        raise DataError("cannot augment an empty segment")
    out = x.astype(np.float64)
    T, F = x.shape
    if policy.noise:
        snr = rng.uniform(*policy.snr_db_range)
        npow = noise_power_frames((T, F), policy.noise_kind, rng, noise_bank, policy.babble_speakers)
        out = add_noise(out, npow, snr)
    if policy.colour and policy.colour_scale > 0 and policy.colour_rank > 0:
        basis = spectral_basis(F, min(policy.colour_rank, F))
        out = out + policy.colour_scale * (rng.normal(size=basis.shape[0]) @ basis)
    if policy.gain:
        out = out + rng.uniform(*policy.gain_db_range) * DB_TO_LOG
    if policy.time_mask and policy.time_mask_max_frames > 0:
        width = int(rng.integers(0, min(policy.time_mask_max_frames, T) + 1))
        if width:
            start = int(rng.integers(0, T - width + 1))
            out[start : start + width] = 0.0
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def augment_cropset(
    crops: CropSet, policy: AugmentPolicy, rng: np.random.Generator, noise_bank=None
) -> CropSet:
    return CropSet(
        np.stack([augment(c, policy, rng, noise_bank) for c in crops.longs]),
        np.stack([augment(c, policy, rng, noise_bank) for c in crops.shorts]) if len(crops.shorts) else crops.shorts,
    )
