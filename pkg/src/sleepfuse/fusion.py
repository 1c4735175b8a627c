"""Embedding fusion and stage classification.

Per-modality embeddings are concatenated (EOG first, frozen for checkpoint
portability) and mapped to five stage logits by a single linear layer.
Supports fused / eog_only / psm_only modes and linear_probe / fine_tune
training regimes; external (precomputed) embeddings are probe-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from sleepfuse.dsp import MelConfig, log_mel_spectrogram
from sleepfuse.encoders import (
    EmbeddingVector,
    EncoderConfig,
    ExternalEmbeddingStore,
    PSM_CLIP_FRAMES,
    ToyAudioEncoder,
    ToyVideoEncoder,
)
from sleepfuse.errors import ConfigError, DataError, InvariantError
from sleepfuse.ingest import STAGE_COUNT, EpochRecord, SleepStage
from sleepfuse.nn import Dense, Tensor, concat
from sleepfuse.nn.checkpoint import load_checkpoint, save_checkpoint

MODES = ("fused", "eog_only", "psm_only")
REGIMES = ("linear_probe", "fine_tune")
CONCAT_ORDER = "eog_first"


def fuse(e_eog: EmbeddingVector, e_psm: EmbeddingVector) -> EmbeddingVector:
    """Concatenate per-modality embeddings, EOG first."""
    for name, e in (("eog", e_eog), ("psm", e_psm)):
        if e is None:
            raise DataError(f"fused mode requires a {name} embedding")
        if not np.all(np.isfinite(e.values)):
            raise DataError(f"non-finite values in {name} embedding")
    return EmbeddingVector(
        np.concatenate([e_eog.values, e_psm.values]), source="fused"
    )


@dataclass
class StagePrediction:
    """Logits, softmax probabilities, and the argmax stage."""

    logits: np.ndarray
    probabilities: np.ndarray
    predicted: SleepStage

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "StagePrediction":
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (STAGE_COUNT,):
            raise DataError(f"expected {STAGE_COUNT} logits, got shape {logits.shape}")
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        probs = exp / exp.sum()
        # np.argmax takes the first maximum: ties break to the lowest code
        return cls(logits=logits, probabilities=probs, predicted=SleepStage(int(logits.argmax())))


@dataclass
class EpochInputs:
    """Model-ready view of one epoch: tokenized arrays plus identity."""

    key: tuple  # (patient_id, epoch_index)
    label_code: int
    audio_tokens: np.ndarray | None = None
    video_tokens: np.ndarray | None = None


class FusionModel:
    """Active encoders (or external stores) plus the linear fusion head."""

    def __init__(
        self,
        mode: str,
        regime: str,
        head: Dense,
        audio_encoder: ToyAudioEncoder | None = None,
        video_encoder: ToyVideoEncoder | None = None,
        eog_store: ExternalEmbeddingStore | None = None,
        psm_store: ExternalEmbeddingStore | None = None,
    ):
        self.mode = mode
        self.regime = regime
        self.head = head
        self.audio_encoder = audio_encoder
        self.video_encoder = video_encoder
        self.eog_store = eog_store
        self.psm_store = psm_store

    # -- dimensions ---------------------------------------------------------

    @property
    def uses_eog(self) -> bool:
        return self.mode in ("fused", "eog_only")

    @property
    def uses_psm(self) -> bool:
        return self.mode in ("fused", "psm_only")

    @property
    def dim_eog(self) -> int:
        if not self.uses_eog:
            return 0
        if self.eog_store is not None:
            return self.eog_store.dim
        return self.audio_encoder.cfg.embedding_dim

    @property
    def dim_psm(self) -> int:
        if not self.uses_psm:
            return 0
        if self.psm_store is not None:
            return self.psm_store.dim
        return self.video_encoder.cfg.embedding_dim

    # -- parameters -----------------------------------------------------------

    def encoder_parameters(self) -> list:
        params = []
        if self.uses_eog and self.audio_encoder is not None:
            params.extend(self.audio_encoder.parameters())
        if self.uses_psm and self.video_encoder is not None:
            params.extend(self.video_encoder.parameters())
        return params

    def parameters(self) -> list:
        return self.encoder_parameters() + self.head.parameters()

    def trainable_parameters(self) -> list:
        if self.regime == "linear_probe":
            return self.head.parameters()
        return self.encoder_parameters() + self.head.parameters()

    # -- forward ----------------------------------------------------------------

    def _embed_modality(self, inputs: list, modality: str) -> Tensor:
        if modality == "eog":
            store, encoder, attr = self.eog_store, self.audio_encoder, "audio_tokens"
        else:
            store, encoder, attr = self.psm_store, self.video_encoder, "video_tokens"
        if store is not None:
            stacked = np.stack([store.get(*inp.key) for inp in inputs]).astype(np.float64)
            return Tensor(stacked)
        tokens = []
        for inp in inputs:
            arr = getattr(inp, attr)
            if arr is None:
                raise DataError(
                    f"epoch {inp.key} is missing {attr} required by mode {self.mode!r}"
                )
            tokens.append(arr)
        batch = Tensor(np.stack(tokens).astype(np.float64))
        return encoder.forward_tokens(batch)

    def embed_batch(self, inputs: list) -> Tensor:
        """(B,) epoch inputs -> (B, dim_eog + dim_psm) fused embeddings."""
        parts = []
        if self.uses_eog:
            parts.append(self._embed_modality(inputs, "eog"))
        if self.uses_psm:
            parts.append(self._embed_modality(inputs, "psm"))
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def head_logits(self, embedded: Tensor) -> Tensor:
        if embedded.shape[-1] != self.head.d_in:
            raise DataError(
                f"embedding dim {embedded.shape[-1]} does not match head width "
                f"{self.head.d_in}"
            )
        return self.head(embedded)

    def logits_batch(self, inputs: list) -> Tensor:
        return self.head_logits(self.embed_batch(inputs))


def classify(model: FusionModel, inputs: EpochInputs) -> StagePrediction:
    """Deterministic single-epoch prediction."""
    logits = model.logits_batch([inputs]).data[0]
    return StagePrediction.from_logits(logits)


def trainable_parameters(model: FusionModel) -> list:
    """Parameter ids trained under the model's regime."""
    return [p.name for p in model.trainable_parameters()]


# ---------------------------------------------------------------------------
# construction


def mel_frames_for_epoch(mel_cfg: MelConfig, epoch_seconds: int = 30) -> int:
    n = epoch_seconds * mel_cfg.target_rate_hz
    return 1 + (n - mel_cfg.window_samples) // mel_cfg.hop_samples


def build_fusion_model(
    mode: str,
    regime: str,
    encoder_cfg: EncoderConfig,
    mel_cfg: MelConfig,
    seed: int | tuple,
    eog_store: ExternalEmbeddingStore | None = None,
    psm_store: ExternalEmbeddingStore | None = None,
    eog_channels: int = 2,
    clip_frames: int = PSM_CLIP_FRAMES,
) -> FusionModel:
    """Build encoders and head with seeded initialization.

    Parameter creation order is fixed (audio encoder, video encoder, head)
    so that checkpoints are portable across runs.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    uses_eog = mode in ("fused", "eog_only")
    uses_psm = mode in ("fused", "psm_only")
    if regime == "fine_tune" and (
        (uses_eog and eog_store is not None) or (uses_psm and psm_store is not None)
    ):
        raise ConfigError(
            "fine_tune requires trainable toy encoders; external embeddings "
            "support linear_probe only"
        )
    encoder_cfg.validate()
    mel_cfg.validate()

    entropy = (seed,) if isinstance(seed, int) else tuple(seed)
    rng = np.random.default_rng(np.random.SeedSequence((*entropy, 0x5F)))
    audio_encoder = None
    video_encoder = None
    dim_eog = 0
    dim_psm = 0
    if uses_eog:
        if eog_store is not None:
            dim_eog = eog_store.dim
        else:
            audio_encoder = ToyAudioEncoder(
                encoder_cfg,
                channels=eog_channels,
                n_mels=mel_cfg.n_mels,
                n_frames=mel_frames_for_epoch(mel_cfg),
                rng=rng,
            )
            dim_eog = encoder_cfg.embedding_dim
    if uses_psm:
        if psm_store is not None:
            dim_psm = psm_store.dim
        else:
            video_encoder = ToyVideoEncoder(encoder_cfg, rng=rng, clip_frames=clip_frames)
            dim_psm = encoder_cfg.embedding_dim
    head = Dense("head", dim_eog + dim_psm, STAGE_COUNT, rng)

    model = FusionModel(
        mode=mode,
        regime=regime,
        head=head,
        audio_encoder=audio_encoder,
        video_encoder=video_encoder,
        eog_store=eog_store,
        psm_store=psm_store,
    )
    if regime == "linear_probe":
        for p in model.encoder_parameters():
            p.trainable = False
    return model


# ---------------------------------------------------------------------------
# feature extraction


class FeatureExtractor:
    """Turns EpochRecords into the tokenized arrays a model consumes."""

    def __init__(self, model: FusionModel, mel_cfg: MelConfig):
        self.model = model
        self.mel_cfg = mel_cfg

    def extract(self, epoch: EpochRecord) -> EpochInputs:
        audio_tokens = None
        video_tokens = None
        if self.model.uses_eog and self.model.eog_store is None:
            spec = log_mel_spectrogram(
                epoch.eog.astype(np.float64), epoch.native_eog_rate_hz, self.mel_cfg
            )
            audio_tokens = self.model.audio_encoder.tokenize(spec.values)
        if self.model.uses_psm and self.model.psm_store is None:
            video_tokens = self.model.video_encoder.tokenize(epoch.psm_clip)
        return EpochInputs(
            key=epoch.key,
            label_code=int(epoch.label),
            audio_tokens=audio_tokens,
            video_tokens=video_tokens,
        )


# ---------------------------------------------------------------------------
# persistence


def parameter_checksums(params: list) -> dict:
    """sha256 of each parameter's value bytes (bit-exactness checks)."""
    return {
        p.name: hashlib.sha256(np.ascontiguousarray(p.data, dtype="<f8").tobytes()).hexdigest()
        for p in params
    }


def model_meta(
    model: FusionModel, encoder_cfg: EncoderConfig, mel_cfg: MelConfig, config_hash: str
) -> dict:
    return {
        "mode": model.mode,
        "regime": model.regime,
        "concat_order": CONCAT_ORDER,
        "dim_eog": model.dim_eog,
        "dim_psm": model.dim_psm,
        "external_eog": model.eog_store is not None,
        "external_psm": model.psm_store is not None,
        "encoder": {
            "model_dim": encoder_cfg.model_dim,
            "head_count": encoder_cfg.head_count,
            "block_count": encoder_cfg.block_count,
            "embedding_dim": encoder_cfg.embedding_dim,
            "audio_patch_frames": encoder_cfg.audio_patch_frames,
            "video_frame_stride": encoder_cfg.video_frame_stride,
        },
        "mel": {
            "target_rate_hz": mel_cfg.target_rate_hz,
            "n_mels": mel_cfg.n_mels,
            "window_length_s": mel_cfg.window_length_s,
            "hop_length_s": mel_cfg.hop_length_s,
            "fft_size": mel_cfg.fft_size,
            "f_min_hz": mel_cfg.f_min_hz,
            "f_max_hz": mel_cfg.f_max_hz,
            "log_floor": mel_cfg.log_floor,
        },
        "config_hash": config_hash,
    }


def save_model(path, model: FusionModel, meta: dict) -> None:
    save_checkpoint(path, model.parameters())
    sidecar = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        fh.write(sidecar)


def load_model(
    path,
    eog_store: ExternalEmbeddingStore | None = None,
    psm_store: ExternalEmbeddingStore | None = None,
) -> tuple:
    """Rebuild a model from a checkpoint and its sidecar.

    External stores must be supplied again when the sidecar says the model
    was probing external embeddings.  Returns (model, meta).
    """
    try:
        with open(str(path) + ".meta", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"checkpoint sidecar not found: {path}.meta") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint sidecar {path}.meta is not valid JSON: {exc}") from exc
    if meta.get("concat_order") != CONCAT_ORDER:
        raise ConfigError(
            f"checkpoint uses concat order {meta.get('concat_order')!r}; this "
            f"build supports {CONCAT_ORDER!r}"
        )
    for side, store in (("eog", eog_store), ("psm", psm_store)):
        if meta.get(f"external_{side}") and store is None:
            raise ConfigError(
                f"checkpoint was trained on external {side} embeddings; pass the "
                f"matching exchange file"
            )
        if store is not None and store.dim != meta[f"dim_{side}"] and meta[f"dim_{side}"]:
            raise ConfigError(
                f"external {side} store dim {store.dim} does not match checkpoint "
                f"dim {meta[f'dim_{side}']}"
            )
    encoder_cfg = EncoderConfig(**meta["encoder"])
    mel_cfg = MelConfig(**meta["mel"])
    model = build_fusion_model(
        meta["mode"],
        meta["regime"],
        encoder_cfg,
        mel_cfg,
        seed=0,
        eog_store=eog_store,
        psm_store=psm_store,
    )
    state = load_checkpoint(path)
    own = {p.name: p for p in model.parameters()}
    if set(state) != set(own):
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        raise ConfigError(
            f"checkpoint parameters do not match model (missing {missing}, "
            f"unexpected {extra})"
        )
    for name, values in state.items():
        if own[name].shape != values.shape:
            raise ConfigError(
                f"parameter {name!r} shape {values.shape} does not match model "
                f"shape {own[name].shape}"
            )
        own[name].data = values
    return model, meta


def assert_frozen_encoders_unchanged(model: FusionModel, before: dict) -> None:
    """Guard for the linear-probe freeze contract."""
    if model.regime != "linear_probe":
        return
    after = parameter_checksums(model.encoder_parameters())
    changed = [name for name, digest in after.items() if before.get(name) != digest]
    if changed:
        raise InvariantError(
            f"linear_probe modified frozen encoder parameters: {changed}"
        )
