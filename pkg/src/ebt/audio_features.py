"""PCM WAV I/O, MFCC extraction and the 1 s translation window."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

MFCC_RATE = 100  # frames per second (10 ms hop)
WINDOW_BEFORE = 80  # 0.8 s of context before t
WINDOW_AFTER = 20  # 0.2 s after t
WINDOW = WINDOW_BEFORE + WINDOW_AFTER


class WavError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    preemphasis: float = 0.97
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 26
    n_ceps: int = 13
    log_floor: float = 1e-10

    @property
    def window(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))


@dataclass
class MfccSequence:
    frames: np.ndarray  # (T, C)
    frame_rate: float = MFCC_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("MFCC frames must be a non-empty (T, C) matrix")

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# WAV


def save_wav(path, clip: AudioClip) -> None:
    ints = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(ints.astype("<i2").tobytes())


def load_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM RIFF/WAVE file; samples are scaled by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: bad magic (not a RIFF/WAVE file)")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        size = struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            if len(body) < size:
                raise WavError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    code, channels, rate, _, _, bits = fmt
    if code != 1 or bits != 16:
        raise WavError(f"{path}: unsupported format code {code} / {bits} bits (need PCM16)")
    if channels != 1:
        raise WavError(f"{path}: {channels} channels, need mono")
    if len(data) % 2:
        raise WavError(f"{path}: truncated sample data")
    ints = np.frombuffer(data, dtype="<i2")
    return AudioClip(ints.astype(np.float32) / 32768.0, rate)


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters spaced evenly in mel, 0 Hz–Nyquist."""
    n_bins = cfg.n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, n_bins))
    for j in range(cfg.n_mels):
        lo, mid, hi = edges_hz[j : j + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[j] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def frame_count(n_samples: int, cfg: MfccConfig) -> int:
    return (n_samples - cfg.window) // cfg.hop + 1


def mel_energies(clip: AudioClip, cfg: MfccConfig | None = None) -> np.ndarray:
    """(T, n_mels) filterbank power, before the log."""
    cfg = cfg or MfccConfig(sample_rate=clip.sample_rate)
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} != config rate {cfg.sample_rate}")
    x = clip.samples.astype(np.float64)
    if x.shape[0] < cfg.window:
        raise ValueError(
            f"clip too short: {x.shape[0]} samples < one {cfg.window_ms} ms window ({cfg.window})"
        )
    emph = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    n = frame_count(x.shape[0], cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n)[:, None]
    frames = emph[idx] * np.hamming(cfg.window)
    spec = np.fft.rfft(frames, cfg.n_fft)
    power = (spec.real**2 + spec.imag**2) / cfg.n_fft
    return power @ mel_filterbank(cfg).T


def compute_mfcc(clip: AudioClip, cfg: MfccConfig | None = None) -> MfccSequence:
    cfg = cfg or MfccConfig(sample_rate=clip.sample_rate)
    energies = mel_energies(clip, cfg)
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    return MfccSequence(ceps, frame_rate=1000.0 / cfg.hop_ms)


# ---------------------------------------------------------------------------
# windows


def window_rows(t: int, n_frames: int) -> np.ndarray:
    """Row indices of the window around MFCC frame ``t`` (edge-replicated)."""
    rows = np.arange(t - WINDOW_BEFORE, t + WINDOW_AFTER)
    return np.clip(rows, 0, n_frames - 1)


def sliding_window(mfcc: MfccSequence, t: int) -> np.ndarray:
    """Frames ``[t-80, t+20)``, out-of-range rows replicate the nearest frame."""
    return mfcc.frames[window_rows(int(t), len(mfcc))]


def video_to_mfcc_frame(t: int, fps: float) -> int:
    return int(round(t * MFCC_RATE / fps))


def windows_for_video(mfcc: MfccSequence, n_video_frames: int, fps: float) -> np.ndarray:
    """(n_video_frames, 100, C) stack of windows aligned to video frames."""
    return np.stack([sliding_window(mfcc, video_to_mfcc_frame(t, fps)) for t in range(n_video_frames)])


def frame_energy(clip: AudioClip, n_video_frames: int, fps: float) -> np.ndarray:
    """RMS amplitude of the audio under each video frame."""
    per = clip.sample_rate / fps
    out = np.zeros(n_video_frames)
    for t in range(n_video_frames):
        lo = int(round(t * per))
        hi = int(round((t + 1) * per))
        seg = clip.samples[lo:hi].astype(np.float64)
        out[t] = np.sqrt(np.mean(seg * seg)) if seg.size else 0.0
    return out
