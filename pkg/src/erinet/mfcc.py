"""MFCC front-end producing 1024-dim audio tokens (32 coefficients x 32 frames)."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_len: int = 480
    hop: int = 256
    n_mels: int = 64
    n_mfcc: int = 32
    block: int = 32
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def validate(self) -> None:
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc={self.n_mfcc} exceeds n_mels={self.n_mels}")
        if min(self.frame_len, self.hop, self.n_mels, self.n_mfcc, self.block) <= 0:
            raise ValueError("MFCC sizes must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(f"mel range {self.fmin}-{self.fmax} Hz outside Nyquist band")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def token_dim(self) -> int:
        return self.n_mfcc * self.block


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the rfft bins, ``(n_mels, n_fft // 2 + 1)``, peak height 1."""
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples: int, cfg: MfccConfig = MfccConfig()) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return (n_samples - cfg.frame_len) // cfg.hop + 1


def mfcc(samples, cfg: MfccConfig = MfccConfig(), rate: int | None = None) -> np.ndarray:
    """Per-frame MFCCs, shape ``(n_frames, n_mfcc)``.

    Hann window, power spectrum, mel filterbank, log with floor, orthonormal DCT-II.
    """
    cfg.validate()
    if rate is not None and rate != cfg.sample_rate:
        raise ValueError(f"signal rate {rate} Hz does not match {cfg.sample_rate} Hz (resample first)")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected mono samples, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("audio contains non-finite samples")
    n = frame_count(len(x), cfg)
    if n == 0:
        raise ValueError(f"signal of {len(x)} samples is shorter than one frame ({cfg.frame_len})")
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n)[:, None]
    frames = x[idx] * get_window("hann", cfg.frame_len, fftbins=True)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(cfg.sample_rate, cfg.frame_len, cfg.n_mels, cfg.fmin, cfg.fmax)
    logmel = np.log(np.maximum(power @ fb.T, cfg.log_floor))
    return dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.n_mfcc]


def block_combine(frames: np.ndarray, block: int = 32) -> np.ndarray:
    """Flatten non-overlapping runs of ``block`` frames into one token each.

    A trailing remainder shorter than ``block`` is dropped, except when the
    whole input is shorter than one block: then it is zero-padded to one token.
    """
    frames = np.asarray(frames)
    n, c = frames.shape
    if n == 0:
        raise ValueError("no MFCC frames to combine")
    if n < block:
        padded = np.zeros((block, c), dtype=frames.dtype)
        padded[:n] = frames
        return padded.reshape(1, block * c)
    m = n // block
    return frames[: m * block].reshape(m, block * c)


def audio_tokens(samples, cfg: MfccConfig = MfccConfig(), rate: int | None = None) -> np.ndarray:
    return block_combine(mfcc(samples, cfg, rate), cfg.block)


# ---------------------------------------------------------------- PCM input


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV to float samples in [-1, 1); multi-channel input is averaged."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM WAV is supported (sample width {w.getsampwidth()})")
        rate, channels = w.getframerate(), w.getnchannels()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return pcm, rate


def write_wav(path, samples, rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def read_raw_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{path}: raw f32 file length {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def read_audio(path, rate: int | None = None) -> tuple[np.ndarray, int]:
    """WAV files carry their own rate; headerless f32 needs ``rate`` (default 16 kHz)."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return read_wav(path)
    return read_raw_f32(path), rate or 16000
