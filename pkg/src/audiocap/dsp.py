"""PCM audio input and 64-band log-mel spectrogram extraction.

Frames are 40 ms with a 20 ms hop and no centering, windowed with a
periodic Hann window; the magnitude-squared FFT is pooled by a triangular
HTK-scale mel filterbank and floored at 1e-10 before the natural log.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int


@dataclass
class LogMelConfig:
    sample_rate: int = 16000
    n_mels: int = 64
    window_ms: float = 40.0
    hop_ms: float = 20.0
    log_floor: float = 1e-10

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        n = 1
        while n < self.window_length:
            n *= 2
        return n


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (T, D)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bands(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file holding 16-bit mono PCM.

    Sample values are scaled by 1/32768. Raises FormatError naming the
    offending field for anything other than PCM-16 mono.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated RIFF header ({len(raw)} bytes)")
    if raw[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF magic")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: missing WAVE form type")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"{path}: chunk {cid.decode('ascii', 'replace')} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format must be PCM(1), got {audio_format}")
    if channels != 1:
        raise FormatError(f"{path}: channels must be 1, got {channels}")
    if bits != 16:
        raise FormatError(f"{path}: bits_per_sample must be 16, got {bits}")
    samples = np.frombuffer(data[:len(data) - (len(data) % 2)], dtype="<i2")
    return Waveform(samples.astype(np.float64) / 32768.0, int(sample_rate))


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit mono PCM."""
    pcm = np.clip(np.rint(np.asarray(samples) * 32768.0), -32768, 32767)
    payload = pcm.astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                                    sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: LogMelConfig) -> np.ndarray:
    """Triangular filters (D, fft_size//2 + 1), HTK mel spacing, unnormalized."""
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0),
                                  cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def band_centers_hz(cfg: LogMelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0),
                                  cfg.n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, cfg: LogMelConfig) -> int:
    return 1 + (n_samples - cfg.window_length) // cfg.hop_length


def log_mel(w: Waveform, cfg: LogMelConfig | None = None) -> LogMelSpectrogram:
    """Extract the (T, D) log-mel feature from a waveform.

    The waveform must be at least one window long and match the configured
    sample rate; other rates are rejected rather than resampled.
    """
    cfg = cfg or LogMelConfig()
    if w.sample_rate != cfg.sample_rate:
        raise InputError(
            f"sample rate {w.sample_rate} does not match configured "
            f"{cfg.sample_rate}; resampling is not supported")
    n = len(w.samples)
    win = cfg.window_length
    hop = cfg.hop_length
    if n < win:
        raise InputError(
            f"waveform of {n} samples is shorter than one {win}-sample window")
    t = frame_count(n, cfg)
    starts = np.arange(t) * hop
    frames = w.samples[starts[:, None] + np.arange(win)[None, :]]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    spectrum = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    banded = power @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log(banded + cfg.log_floor))
