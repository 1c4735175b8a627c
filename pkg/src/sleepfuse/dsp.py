"""Deterministic signal processing: resampling, STFT, log-mel spectrograms,
and the baseline preprocessing adapters (bilinear upscale, 3,000-sample
downsampling).

Everything here is a pure function of its inputs; identical input bits give
identical output bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sleepfuse.errors import ConfigError, DataError, FormatError

EPOCH_SECONDS = 30

# polyphase windowed-sinc resampler parameters
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass
class MelConfig:
    """Log-mel spectrogram parameters.

    ``fft_size=None`` selects the next power of two at or above the window
    length in samples (512 for the default 25 ms window at 16 kHz).
    """

    target_rate_hz: int = 16_000
    n_mels: int = 128
    window_length_s: float = 0.025
    hop_length_s: float = 0.010
    fft_size: int | None = None
    f_min_hz: float = 0.0
    f_max_hz: float = 8_000.0
    log_floor: float = 1e-6

    @property
    def window_samples(self) -> int:
        return int(round(self.window_length_s * self.target_rate_hz))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length_s * self.target_rate_hz))

    @property
    def effective_fft_size(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        return 1 << max(0, (self.window_samples - 1).bit_length())

    @property
    def n_bins(self) -> int:
        return self.effective_fft_size // 2 + 1

    def validate(self) -> None:
        if self.target_rate_hz <= 0:
            raise ConfigError(f"target_rate_hz must be positive, got {self.target_rate_hz}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.window_samples < 1 or self.hop_samples < 1:
            raise ConfigError("window and hop must be at least one sample")
        if self.window_samples > self.effective_fft_size:
            raise ConfigError(
                f"window_samples {self.window_samples} exceeds fft_size "
                f"{self.effective_fft_size}"
            )
        if not 0.0 <= self.f_min_hz < self.f_max_hz:
            raise ConfigError(
                f"need 0 <= f_min < f_max, got ({self.f_min_hz}, {self.f_max_hz})"
            )
        if self.f_max_hz > self.target_rate_hz / 2:
            raise ConfigError(
                f"f_max_hz {self.f_max_hz} above Nyquist {self.target_rate_hz / 2}"
            )
        if self.n_mels + 2 > self.n_bins:
            raise ConfigError(
                f"n_mels={self.n_mels} needs at least {self.n_mels + 2} FFT bins, "
                f"fft_size {self.effective_fft_size} provides {self.n_bins}"
            )
        if self.log_floor <= 0.0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")


@dataclass
class MelSpectrogram:
    """Per-channel log-mel energies, shape (channels, n_mels, n_frames)."""

    values: np.ndarray
    hop_length_s: float

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# resampling


def _design_lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for a rational up/down resampler.

    Length TAPS_PER_PHASE*up + 1 (odd, symmetric), gain ``up`` in the
    passband to compensate zero-stuffing, cutoff at the tighter of the two
    Nyquist frequencies.
    """
    half = TAPS_PER_PHASE * up // 2
    n = np.arange(-half, half + 1, dtype=np.float64)
    # cutoff as a fraction of the internal (upsampled) rate
    fc = 0.5 / max(up, down)
    h = 2.0 * fc * np.sinc(2.0 * fc * n)
    h *= np.kaiser(2 * half + 1, KAISER_BETA)
    return h * up


def resample(signal: np.ndarray, src_rate_hz: int, dst_rate_hz: int) -> np.ndarray:
    """Band-limited rate conversion via a polyphase windowed-sinc filter.

    Output length is round(len(signal) * dst/src).  Each polyphase branch is
    normalized to unit DC gain, so constant signals pass through exactly.
    The signal is extended by edge replication; the first and last
    ~TAPS_PER_PHASE/2 input samples still carry boundary transients for
    non-constant content.
    """
    if src_rate_hz <= 0 or dst_rate_hz <= 0:
        raise ConfigError(
            f"sample rates must be positive, got {src_rate_hz} -> {dst_rate_hz}"
        )
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size == 0:
        raise DataError("resample expects a non-empty 1-D signal")
    if src_rate_hz == dst_rate_hz:
        return signal.copy()

    g = math.gcd(int(src_rate_hz), int(dst_rate_hz))
    up = int(dst_rate_hz) // g
    down = int(src_rate_hz) // g
    n_in = signal.size
    n_out = (n_in * up + down // 2) // down

    h = _design_lowpass(up, down)
    half = TAPS_PER_PHASE * up // 2  # group delay in upsampled samples
    width = TAPS_PER_PHASE + 1
    # phase p holds taps h[p], h[p+up], ...; zero-pad so each has `width` taps
    h_padded = np.zeros(width * up, dtype=np.float64)
    h_padded[: h.size] = h
    # reversed per-phase taps so each output is a plain dot with a window
    phases = h_padded.reshape(width, up).T[:, ::-1].copy()
    phases /= phases.sum(axis=1, keepdims=True)  # exact unit DC gain per branch

    margin = half // up  # = TAPS_PER_PHASE // 2 input samples
    padded = np.concatenate(
        [
            np.full(margin, signal[0], dtype=np.float64),
            signal,
            np.full(margin, signal[-1], dtype=np.float64),
        ]
    )
    windows = sliding_window_view(padded, width)

    out = np.empty(n_out, dtype=np.float64)
    for n0 in range(min(up, n_out)):
        p = (n0 * down) % up
        q0 = (n0 * down) // up
        count = len(range(n0, n_out, up))
        out[n0::up] = windows[q0 :: down][:count] @ phases[p]
    return out


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _filter_edge_bins(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 strictly increasing FFT-bin indices on the mel scale.

    Edge bins are snapped to distinct integers so that every filter owns at
    least its peak bin: at 128 mels over 257 bins the low-frequency mel
    spacing is below one bin and a naive rounding would leave empty rows.
    """
    n_bins = cfg.n_bins
    bin_width = cfg.target_rate_hz / cfg.effective_fft_size
    mel_points = np.linspace(
        hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2
    )
    freqs = mel_to_hz(mel_points)
    edges = np.round(freqs / bin_width).astype(np.int64)
    # snap the outermost edges outward so (f_min, f_max) is fully covered
    edges[0] = math.floor(cfg.f_min_hz / bin_width)
    edges[-1] = min(math.ceil(cfg.f_max_hz / bin_width), n_bins - 1)
    for i in range(1, edges.size):
        if edges[i] <= edges[i - 1]:
            edges[i] = edges[i - 1] + 1
    if edges[-1] > n_bins - 1:
        edges[-1] = n_bins - 1
        for i in range(edges.size - 2, -1, -1):
            if edges[i] >= edges[i + 1]:
                edges[i] = edges[i + 1] - 1
    if edges[0] < 0 or np.any(np.diff(edges) < 1):
        raise ConfigError(
            f"cannot place {cfg.n_mels} mel filters on {n_bins} FFT bins "
            f"between {cfg.f_min_hz} and {cfg.f_max_hz} Hz"
        )
    return edges


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, fft_size // 2 + 1).

    Row m rises linearly from edge bin m to a unit peak at edge bin m+1 and
    falls to zero at edge bin m+2; peak bins strictly increase.
    """
    cfg.validate()
    edges = _filter_edge_bins(cfg)
    fbank = np.zeros((cfg.n_mels, cfg.n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        for k in range(left + 1, center + 1):
            fbank[m, k] = (k - left) / (center - left)
        for k in range(center + 1, right):
            fbank[m, k] = (right - k) / (right - center)
    return fbank


def filter_peak_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center (peak) frequency in Hz of each mel filter."""
    edges = _filter_edge_bins(cfg)
    bin_width = cfg.target_rate_hz / cfg.effective_fft_size
    return edges[1:-1] * bin_width


# ---------------------------------------------------------------------------
# spectrograms


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n, dtype=np.float64) / n)


def stft_power(
    signal: np.ndarray, window_samples: int, hop_samples: int, fft_size: int
) -> np.ndarray:
    """Hann-windowed power spectrogram, shape (n_frames, fft_size // 2 + 1)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size < window_samples:
        raise DataError(
            f"signal of {signal.size} samples shorter than window {window_samples}"
        )
    n_frames = 1 + (signal.size - window_samples) // hop_samples
    idx = np.arange(window_samples)[None, :] + hop_samples * np.arange(n_frames)[:, None]
    frames = signal[idx] * hann_window(window_samples)[None, :]
    spectrum = np.fft.rfft(frames, n=fft_size, axis=1)
    return spectrum.real**2 + spectrum.imag**2


def log_mel_spectrogram(
    eog: np.ndarray, native_rate_hz: int, cfg: MelConfig | None = None
) -> MelSpectrogram:
    """Per-channel log-mel spectrogram of one 30 s multi-channel epoch.

    Per channel: remove the mean, resample to ``cfg.target_rate_hz``, take
    the Hann-windowed STFT power, project through the mel filterbank, and
    apply a natural log with additive floor ``cfg.log_floor``.
    """
    if cfg is None:
        cfg = MelConfig()
    cfg.validate()
    eog = np.asarray(eog, dtype=np.float64)
    if eog.ndim != 2:
        raise DataError(f"expected (channels, samples) EOG input, got shape {eog.shape}")
    expected = EPOCH_SECONDS * native_rate_hz
    if eog.shape[1] != expected:
        raise DataError(
            f"epoch must hold {EPOCH_SECONDS} s at {native_rate_hz} Hz "
            f"({expected} samples), got {eog.shape[1]}"
        )
    fbank = mel_filterbank(cfg)
    channels = []
    for ch in eog:
        centered = ch - ch.mean()
        rs = resample(centered, native_rate_hz, cfg.target_rate_hz)
        power = stft_power(rs, cfg.window_samples, cfg.hop_samples, cfg.effective_fft_size)
        mel = power @ fbank.T
        channels.append(np.log(mel + cfg.log_floor).T)
    return MelSpectrogram(values=np.stack(channels), hop_length_s=cfg.hop_length_s)


# ---------------------------------------------------------------------------
# baseline input adapters


def bilinear_upscale(frame: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D grid."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise DataError(f"expected a 2-D frame, got shape {frame.shape}")
    h, w = frame.shape
    if target_h < h or target_w < w:
        raise DataError(
            f"target {target_h}x{target_w} smaller than source {h}x{w}"
        )
    ys = np.linspace(0.0, h - 1.0, target_h) if target_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, target_w) if target_w > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros(target_h, np.int64)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros(target_w, np.int64)
    wy = (ys - y0)[:, None] if h > 1 else np.zeros((target_h, 1))
    wx = (xs - x0)[None, :] if w > 1 else np.zeros((1, target_w))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    f00 = frame[np.ix_(y0, x0)]
    f01 = frame[np.ix_(y0, x1)]
    f10 = frame[np.ix_(y1, x0)]
    f11 = frame[np.ix_(y1, x1)]
    return (
        f00 * (1 - wy) * (1 - wx)
        + f01 * (1 - wy) * wx
        + f10 * wy * (1 - wx)
        + f11 * wy * wx
    )


def downsample_epoch_to_3000(channel: np.ndarray, native_rate_hz: int) -> np.ndarray:
    """Resample one 30 s channel to 100 Hz (3,000 samples)."""
    channel = np.asarray(channel, dtype=np.float64)
    expected = EPOCH_SECONDS * native_rate_hz
    if channel.ndim != 1 or channel.size != expected:
        raise DataError(
            f"expected one {EPOCH_SECONDS} s channel at {native_rate_hz} Hz "
            f"({expected} samples), got shape {channel.shape}"
        )
    return resample(channel, native_rate_hz, 100)


# ---------------------------------------------------------------------------
# debug spectrogram dumps


SPECTROGRAM_HEADER = struct.Struct("<III")  # channels, n_mels, n_frames


def write_spectrogram(path, spec: MelSpectrogram) -> None:
    c, m, f = spec.values.shape
    payload = spec.values.astype("<f4").tobytes()
    Path(path).write_bytes(SPECTROGRAM_HEADER.pack(c, m, f) + payload)


def read_spectrogram(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < SPECTROGRAM_HEADER.size:
        raise FormatError(f"{path}: truncated spectrogram header")
    c, m, f = SPECTROGRAM_HEADER.unpack_from(blob)
    values = np.frombuffer(blob, dtype="<f4", offset=SPECTROGRAM_HEADER.size)
    if values.size != c * m * f:
        raise FormatError(
            f"{path}: payload holds {values.size} values, header promises {c * m * f}"
        )
    return values.reshape(c, m, f).astype(np.float32)
