"""PCM16 WAV reading/writing and log-mel filterbank features."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, UnsupportedFormatError

LOG_FLOOR = 1e-10


def read_wav_pcm16(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file.

    Returns the samples scaled to ``[-1, 1)`` as float32 and the sample rate
    taken from the header.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from exc
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only PCM16 supported")
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, only mono supported")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, sr


def write_wav_pcm16(path: str | Path, samples: np.ndarray, sr: int) -> None:
    """Write samples in [-1, 1] as mono PCM16; values are clipped and rounded."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sr))
        wf.writeframes(pcm.astype("<i2").tobytes())


@dataclass(frozen=True)
class LogMelConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 23
    fmin: float = 20.0
    fmax: float | None = None  # None -> sr / 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_center_frequencies(sr: int, n_mels: int, fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    fmax = sr / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def n_frames(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        raise DataError(f"waveform of {n_samples} samples is shorter than one {win}-sample window")
    return 1 + (n_samples - win) // hop


def logmel(waveform: np.ndarray, sr: int, cfg: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """Log mel-filterbank energies, one row per 10 ms frame by default.

    Frames are Hann-windowed without padding, so
    ``T = 1 + (len - win) // hop``. Power is floored at 1e-10 before the log.
    """
    x = np.asarray(waveform, dtype=np.float64)
    win = int(round(sr * cfg.win_ms / 1000.0))
    hop = int(round(sr * cfg.hop_ms / 1000.0))
    t = n_frames(len(x), win, hop)
    n_fft = 1 << int(np.ceil(np.log2(win)))
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = x[idx] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fmax = sr / 2 if cfg.fmax is None else cfg.fmax
    fb = mel_filterbank(sr, n_fft, cfg.n_mels, cfg.fmin, fmax)
    return np.log(power @ fb.T + LOG_FLOOR).astype(np.float32)
