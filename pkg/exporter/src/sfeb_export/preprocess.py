"""Modality-specific preprocessing into model-ready clip arrays.

EOG (audio route): int16 counts scaled by 1/32768 (what an audio loader
would see for these WAV files), channel policy applied (mix = average of
left and right, or a single named channel), resampled to 16 kHz, then split
into the model's native clip length; a trailing partial clip is zero-padded.

PSM (video route): counts scaled to [0, 1], replicated to three identical
channels, bilinearly resized to 224x224, then split into clips with a fixed
number of evenly spaced frames per clip.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom
from scipy.signal import resample_poly

from sfeb_export.errors import FormatError
from sfeb_export.formats import EPOCH_SECONDS, PSM_FRAMES_PER_EPOCH

AUDIO_RATE_HZ = 16_000
PCM_SCALE = 32768.0
PSM_MAX_COUNT = 2046.0
IMAGE_SIZE = 224

CHANNEL_POLICIES = ("mix", "left", "right")


def audio_epoch_clips(
    epoch_samples: np.ndarray,
    native_rate_hz: int,
    channel_policy: str = "mix",
    clip_seconds: float = 2.0,
) -> np.ndarray:
    """(n, 2) int16 epoch -> (n_clips, clip_samples) float32 at 16 kHz."""
    if channel_policy not in CHANNEL_POLICIES:
        raise FormatError(f"unknown channel policy {channel_policy!r}")
    scaled = epoch_samples.astype(np.float64) / PCM_SCALE
    if channel_policy == "mix":
        mono = scaled.mean(axis=1)
    elif channel_policy == "left":
        mono = scaled[:, 0]
    else:
        mono = scaled[:, 1]
    up = AUDIO_RATE_HZ
    down = int(native_rate_hz)
    waveform = resample_poly(mono, up, down)
    clip_samples = int(round(clip_seconds * AUDIO_RATE_HZ))
    n_clips = -(-waveform.size // clip_samples)  # ceil
    padded = np.zeros(n_clips * clip_samples, dtype=np.float64)
    padded[: waveform.size] = waveform
    return padded.reshape(n_clips, clip_samples).astype(np.float32)


def video_epoch_clips(
    epoch_frames: np.ndarray,
    clip_seconds: float = 2.0,
    frames_per_clip: int = 2,
    psm_rate_hz: int = 10,
) -> np.ndarray:
    """(300, 18, 8) counts -> (n_clips, 3, frames_per_clip, 224, 224) f32.

    Grayscale pressure is replicated to three channels; each clip keeps
    ``frames_per_clip`` evenly spaced frames.
    """
    if epoch_frames.shape != (PSM_FRAMES_PER_EPOCH, 18, 8):
        raise FormatError(
            f"expected ({PSM_FRAMES_PER_EPOCH}, 18, 8) epoch frames, got "
            f"{epoch_frames.shape}"
        )
    frames_per_window = int(round(clip_seconds * psm_rate_hz))
    n_clips = PSM_FRAMES_PER_EPOCH // frames_per_window
    gray = np.clip(epoch_frames.astype(np.float64) / PSM_MAX_COUNT, 0.0, 1.0)
    clips = np.empty(
        (n_clips, 3, frames_per_clip, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32
    )
    for c in range(n_clips):
        window = gray[c * frames_per_window : (c + 1) * frames_per_window]
        picks = np.linspace(0, frames_per_window - 1, frames_per_clip).round().astype(int)
        for f, idx in enumerate(picks):
            resized = zoom(
                window[idx],
                (IMAGE_SIZE / window[idx].shape[0], IMAGE_SIZE / window[idx].shape[1]),
                order=1,
                grid_mode=True,
                mode="nearest",
            )
            clips[c, :, f] = resized.astype(np.float32)[None, :, :]
    return clips


def audio_epochs_of_patient(
    samples: np.ndarray, native_rate_hz: int, n_epochs: int
) -> list:
    """Split the full (n, 2) recording into per-epoch sample blocks."""
    per_epoch = EPOCH_SECONDS * int(native_rate_hz)
    return [
        samples[i * per_epoch : (i + 1) * per_epoch] for i in range(n_epochs)
    ]


def video_epochs_of_patient(frames: np.ndarray, n_epochs: int) -> list:
    return [
        frames[i * PSM_FRAMES_PER_EPOCH : (i + 1) * PSM_FRAMES_PER_EPOCH]
        for i in range(n_epochs)
    ]
