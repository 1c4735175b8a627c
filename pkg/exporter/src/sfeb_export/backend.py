"""Embedding backends.

A backend turns preprocessed clips into one fixed-dimension vector per
clip; the exporter mean-pools clip vectors into the epoch embedding.

``StubBackend`` is a deterministic stand-in for contract tests: the vector
is a seeded draw keyed on the clip bytes, so bit-identical inputs always
produce bit-identical embeddings.  ``ImageBindBackend`` wraps the released
pre-trained model and requires its runtime and weights to be installed
locally.
"""

from __future__ import annotations

import hashlib

import numpy as np

from sfeb_export.errors import WeightsUnavailableError

EMBEDDING_DIM = 1024


class StubBackend:
    """Deterministic hash-seeded projection at the real embedding width."""

    name = "stub"

    def __init__(self, dim: int = EMBEDDING_DIM):
        self.dim = dim

    def _embed_one(self, clip: np.ndarray) -> np.ndarray:
        digest = hashlib.sha256(np.ascontiguousarray(clip, dtype="<f4").tobytes()).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.dim).astype(np.float32)

    def embed_clips(self, clips: np.ndarray, modality: str) -> np.ndarray:
        return np.stack([self._embed_one(clip) for clip in clips])


class ImageBindBackend:
    """Runs clips through the released pre-trained multimodal model.

    The ``imagebind`` package and its checkpoint must be available locally;
    inference is pinned deterministic (eval mode, no grad, fixed seeds).
    """

    name = "imagebind"

    # CLIP-style normalization used by the model's vision route
    _VISION_MEAN = (0.48145466, 0.4578275, 0.40821073)
    _VISION_STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, weights_path: str, device: str = "cpu"):
        try:
            import torch
            from imagebind.models import imagebind_model
            from imagebind.models.imagebind_model import ModalityType
        except ImportError as exc:
            raise WeightsUnavailableError(
                "the imagebind runtime is not installed; install the released "
                "package and weights, or use --backend stub for contract tests"
            ) from exc
        self._torch = torch
        self._modality_type = ModalityType
        torch.manual_seed(0)
        torch.use_deterministic_algorithms(True, warn_only=True)
        model = imagebind_model.imagebind_huge(pretrained=False)
        try:
            state = torch.load(weights_path, map_location="cpu")
        except FileNotFoundError as exc:
            raise WeightsUnavailableError(
                f"pre-trained weights not found at {weights_path}"
            ) from exc
        model.load_state_dict(state)
        model.eval()
        self.device = device
        self.model = model.to(device)
        self.dim = EMBEDDING_DIM

    def _audio_features(self, clips):
        """16 kHz waveform clips -> the model's 128-mel input tensors."""
        import torchaudio

        torch = self._torch
        specs = []
        for clip in clips:
            waveform = torch.from_numpy(np.asarray(clip, dtype=np.float32))[None, :]
            fbank = torchaudio.compliance.kaldi.fbank(
                waveform,
                htk_compat=True,
                sample_frequency=16_000,
                use_energy=False,
                window_type="hanning",
                num_mel_bins=128,
                dither=0.0,
                frame_length=25,
                frame_shift=10,
            )
            # fixed 2 s clip -> 204 frames; normalize like the released loader
            fbank = (fbank - (-4.268)) / (9.138 * 2)
            specs.append(fbank.T[None, :, :])
        return torch.stack(specs)

    def _vision_features(self, clips):
        torch = self._torch
        mean = torch.tensor(self._VISION_MEAN).view(3, 1, 1, 1)
        std = torch.tensor(self._VISION_STD).view(3, 1, 1, 1)
        batch = torch.from_numpy(np.asarray(clips, dtype=np.float32))
        return (batch - mean) / std

    def embed_clips(self, clips: np.ndarray, modality: str) -> np.ndarray:
        torch = self._torch
        mt = self._modality_type
        with torch.no_grad():
            if modality == "eog_audio":
                inputs = {mt.AUDIO: self._audio_features(clips).to(self.device)}
                out = self.model(inputs)[mt.AUDIO]
            else:
                inputs = {mt.VISION: self._vision_features(clips).to(self.device)}
                out = self.model(inputs)[mt.VISION]
        return out.cpu().numpy().astype(np.float32)


def make_backend(name: str, weights_path: str | None = None, device: str = "cpu"):
    if name == "stub":
        return StubBackend()
    if name == "imagebind":
        if not weights_path:
            raise WeightsUnavailableError(
                "--backend imagebind requires --weights pointing at the "
                "released checkpoint"
            )
        return ImageBindBackend(weights_path, device=device)
    raise WeightsUnavailableError(f"unknown backend {name!r}")
