"""Per-modality encoders: toy trainable transformers mapping one epoch to one
fixed-dimension embedding, plus the exchange-file reader for externally
precomputed embeddings.

Exchange file ("SFEB") layout, little-endian:

    magic "SFEB" | u32 version = 1 | u32 dim | u32 modality code | u64 count
    per record:
        u16 patient_id length | patient_id bytes (utf-8) | u32 epoch_index
        | dim * f32 values

Modality codes: 0 = audio/EOG, 1 = video/PSM.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sleepfuse.dsp import MelSpectrogram
from sleepfuse.errors import ConfigError, DataError, FormatError
from sleepfuse.nn import Dense, Parameter, Tensor, TransformerBlock, init_uniform

PSM_CLIP_FRAMES = 300
PSM_FRAME_VALUES = 18 * 8

MODALITY_CODES = {"eog_audio": 0, "psm_video": 1}
MODALITY_NAMES = {code: name for name, code in MODALITY_CODES.items()}


@dataclass
class EncoderConfig:
    """Toy encoder shape parameters (paper-scale dims stay configurable)."""

    model_dim: int = 32
    head_count: int = 4
    block_count: int = 2
    embedding_dim: int = 64
    audio_patch_frames: int = 100  # mel frames per audio token
    video_frame_stride: int = 10  # PSM frame subsampling

    def validate(self) -> None:
        if self.model_dim < 1 or self.embedding_dim < 1:
            raise ConfigError("model_dim and embedding_dim must be positive")
        if self.model_dim % self.head_count != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by head_count {self.head_count}"
            )
        if self.block_count < 0:
            raise ConfigError(f"block_count must be >= 0, got {self.block_count}")
        if self.audio_patch_frames < 1 or self.video_frame_stride < 1:
            raise ConfigError("audio_patch_frames and video_frame_stride must be >= 1")


@dataclass
class EmbeddingVector:
    """Fixed-dimension encoder output; source is one of toy_audio,
    toy_video, external."""

    values: np.ndarray
    source: str

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class _ToyTransformerEncoder:
    """Shared machinery: project tokens, add positions, attend, pool."""

    source = "toy"

    def __init__(
        self,
        name: str,
        cfg: EncoderConfig,
        token_dim: int,
        n_tokens: int,
        rng: np.random.Generator,
    ):
        cfg.validate()
        if n_tokens < 1:
            raise DataError(f"{name}: input yields no tokens")
        self.cfg = cfg
        self.name = name
        self.token_dim = token_dim
        self.n_tokens = n_tokens
        self.proj = Dense(f"{name}.proj", token_dim, cfg.model_dim, rng)
        self.pos = Parameter(
            f"{name}.pos",
            init_uniform(rng, (n_tokens, cfg.model_dim), cfg.model_dim),
        )
        self.blocks = [
            TransformerBlock(f"{name}.block{i}", cfg.model_dim, cfg.head_count, rng)
            for i in range(cfg.block_count)
        ]
        self.out = Dense(f"{name}.out", cfg.model_dim, cfg.embedding_dim, rng)

    def parameters(self) -> list:
        params = self.proj.parameters() + [self.pos]
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.out.parameters())
        return params

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        """(..., n_tokens, token_dim) -> (..., embedding_dim)."""
        if tokens.shape[-2:] != (self.n_tokens, self.token_dim):
            raise DataError(
                f"{self.name}: expected (..., {self.n_tokens}, {self.token_dim}) "
                f"tokens, got {tokens.shape}"
            )
        unbatched = tokens.ndim == 2
        if unbatched:
            tokens = tokens.reshape(1, self.n_tokens, self.token_dim)
        h = self.proj(tokens) + self.pos.tensor
        for block in self.blocks:
            h = block(h)
        pooled = h.mean(axis=-2)
        out = self.out(pooled)
        return out.reshape(self.cfg.embedding_dim) if unbatched else out


class ToyAudioEncoder(_ToyTransformerEncoder):
    """Tokenizes a stacked-channel mel spectrogram into non-overlapping time
    patches; the trailing partial patch is dropped."""

    source = "toy_audio"

    def __init__(
        self,
        cfg: EncoderConfig,
        channels: int,
        n_mels: int,
        n_frames: int,
        rng: np.random.Generator,
        name: str = "audio",
    ):
        self.channels = channels
        self.n_mels = n_mels
        self.n_frames = n_frames
        n_tokens = n_frames // cfg.audio_patch_frames
        token_dim = channels * n_mels * cfg.audio_patch_frames
        super().__init__(name, cfg, token_dim, n_tokens, rng)

    def tokenize(self, values: np.ndarray) -> np.ndarray:
        """(channels, n_mels, n_frames) -> (n_tokens, token_dim), float32."""
        if values.shape != (self.channels, self.n_mels, self.n_frames):
            raise DataError(
                f"{self.name}: expected spectrogram shape "
                f"({self.channels}, {self.n_mels}, {self.n_frames}), got {values.shape}"
            )
        patch = self.cfg.audio_patch_frames
        used = self.n_tokens * patch
        # (C, M, T*P) -> (T, C, M, P) -> flat per token
        trimmed = values[:, :, :used].reshape(self.channels, self.n_mels, self.n_tokens, patch)
        tokens = trimmed.transpose(2, 0, 1, 3).reshape(self.n_tokens, self.token_dim)
        return np.ascontiguousarray(tokens, dtype=np.float32)

    def encode(self, spec: MelSpectrogram) -> EmbeddingVector:
        if spec.channel_count not in (1, 2):
            raise DataError(f"expected 1 or 2 spectrogram channels, got {spec.channel_count}")
        tokens = Tensor(self.tokenize(np.asarray(spec.values)))
        return EmbeddingVector(self.forward_tokens(tokens).data.copy(), self.source)


class ToyVideoEncoder(_ToyTransformerEncoder):
    """Subsamples PSM clip frames by stride; each kept frame is one token."""

    source = "toy_video"

    def __init__(
        self,
        cfg: EncoderConfig,
        rng: np.random.Generator,
        clip_frames: int = PSM_CLIP_FRAMES,
        name: str = "video",
    ):
        self.clip_frames = clip_frames
        n_tokens = clip_frames // cfg.video_frame_stride
        super().__init__(name, cfg, PSM_FRAME_VALUES, n_tokens, rng)

    def tokenize(self, clip: np.ndarray) -> np.ndarray:
        """(clip_frames, 18, 8) -> (n_tokens, 144), float32."""
        clip = np.asarray(clip)
        if clip.shape != (self.clip_frames, 18, 8):
            raise DataError(
                f"{self.name}: expected clip shape ({self.clip_frames}, 18, 8), "
                f"got {clip.shape}"
            )
        kept = clip[:: self.cfg.video_frame_stride][: self.n_tokens]
        return np.ascontiguousarray(
            kept.reshape(self.n_tokens, PSM_FRAME_VALUES), dtype=np.float32
        )

    def encode(self, clip: np.ndarray) -> EmbeddingVector:
        tokens = Tensor(self.tokenize(clip))
        return EmbeddingVector(self.forward_tokens(tokens).data.copy(), self.source)


# ---------------------------------------------------------------------------
# external embedding exchange format

_SFEB_MAGIC = b"SFEB"
_SFEB_VERSION = 1
_SFEB_HEAD = struct.Struct("<4sIIIQ")
_SFEB_PID_LEN = struct.Struct("<H")
_SFEB_EPOCH = struct.Struct("<I")


@dataclass
class ExternalEmbeddingStore:
    """Embeddings keyed by (patient_id, epoch_index); one modality per file."""

    dim: int
    modality: str
    vectors: dict = field(default_factory=dict)

    def get(self, patient_id: str, epoch_index: int) -> np.ndarray:
        try:
            return self.vectors[(patient_id, epoch_index)]
        except KeyError:
            raise DataError(
                f"no external {self.modality} embedding for "
                f"({patient_id!r}, {epoch_index})"
            ) from None

    def __len__(self) -> int:
        return len(self.vectors)


def write_external_embeddings(path, store: ExternalEmbeddingStore) -> None:
    if store.modality not in MODALITY_CODES:
        raise ConfigError(f"unknown modality {store.modality!r}")
    chunks = [
        _SFEB_HEAD.pack(
            _SFEB_MAGIC,
            _SFEB_VERSION,
            store.dim,
            MODALITY_CODES[store.modality],
            len(store.vectors),
        )
    ]
    for (patient_id, epoch_index), values in store.vectors.items():
        values = np.asarray(values, dtype="<f4")
        if values.shape != (store.dim,):
            raise DataError(
                f"embedding for ({patient_id!r}, {epoch_index}) has shape "
                f"{values.shape}, store dim is {store.dim}"
            )
        pid = patient_id.encode("utf-8")
        chunks.append(_SFEB_PID_LEN.pack(len(pid)))
        chunks.append(pid)
        chunks.append(_SFEB_EPOCH.pack(epoch_index))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_external_embeddings(path) -> ExternalEmbeddingStore:
    """Read an SFEB exchange file; rejects bad magic, truncation, duplicates."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"embedding exchange file not found: {path}") from None
    if len(blob) < _SFEB_HEAD.size:
        raise FormatError(f"{path}: truncated exchange-file header")
    magic, version, dim, modality_code, count = _SFEB_HEAD.unpack_from(blob)
    if magic != _SFEB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_SFEB_MAGIC!r}")
    if version != _SFEB_VERSION:
        raise FormatError(f"{path}: unsupported exchange-file version {version}")
    if modality_code not in MODALITY_NAMES:
        raise FormatError(f"{path}: unknown modality code {modality_code}")
    store = ExternalEmbeddingStore(dim=dim, modality=MODALITY_NAMES[modality_code])
    offset = _SFEB_HEAD.size
    for _ in range(count):
        try:
            (pid_len,) = _SFEB_PID_LEN.unpack_from(blob, offset)
            offset += _SFEB_PID_LEN.size
            if len(blob) < offset + pid_len:
                raise FormatError(f"{path}: truncated patient id")
            patient_id = blob[offset : offset + pid_len].decode("utf-8")
            offset += pid_len
            (epoch_index,) = _SFEB_EPOCH.unpack_from(blob, offset)
            offset += _SFEB_EPOCH.size
        except struct.error as exc:
            raise FormatError(f"{path}: truncated record ({exc})") from exc
        end = offset + 4 * dim
        if end > len(blob):
            raise FormatError(
                f"{path}: truncated values for ({patient_id!r}, {epoch_index})"
            )
        values = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset = end
        key = (patient_id, epoch_index)
        if key in store.vectors:
            raise FormatError(f"{path}: duplicate record for {key}")
        store.vectors[key] = values
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return store
