"""The export job runner.

For every (patient, epoch) in the manifest, preprocess the requested
modality into native-length clips, embed each clip, mean-pool the clip
vectors into the epoch embedding, and append the record.  Per-epoch
failures are recorded and skipped; the run summary and skip list are
written as JSON sidecars next to the exchange file, and the exchange file
itself is written atomically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfeb_export import formats, preprocess
from sfeb_export.errors import ExporterError, FormatError

logger = logging.getLogger(__name__)

WINDOW_POLICIES = ("split_mean",)


@dataclass
class ExportJob:
    manifest_path: str
    modality: str  # "eog_audio" | "psm_video"
    out_path: str
    device: str = "cpu"
    window_policy: str = "split_mean"
    clip_seconds: float = 2.0
    channel_policy: str = "mix"  # EOG only: mix | left | right
    batch_size: int = 16

    def validate(self) -> None:
        if self.modality not in formats.MODALITY_CODES:
            raise FormatError(f"unknown modality {self.modality!r}")
        if self.window_policy not in WINDOW_POLICIES:
            raise FormatError(f"unknown window policy {self.window_policy!r}")
        if self.channel_policy not in preprocess.CHANNEL_POLICIES:
            raise FormatError(f"unknown channel policy {self.channel_policy!r}")
        if self.clip_seconds <= 0:
            raise FormatError("clip_seconds must be positive")


@dataclass
class ExportSummary:
    out_path: str
    modality: str
    dim: int
    attempted: int
    written: int
    skipped: list = field(default_factory=list)  # (patient_id, epoch, reason)

    def to_dict(self) -> dict:
        return {
            "out_path": str(self.out_path),
            "modality": self.modality,
            "dim": self.dim,
            "attempted": self.attempted,
            "written": self.written,
            "skipped": [
                {"patient_id": p, "epoch_index": e, "reason": r}
                for p, e, r in self.skipped
            ],
        }


def _epoch_clips(job: ExportJob, patient, samples, frames, epoch_index):
    if job.modality == "eog_audio":
        per_epoch = formats.EPOCH_SECONDS * patient.eog_rate_hz
        block = samples[epoch_index * per_epoch : (epoch_index + 1) * per_epoch]
        return preprocess.audio_epoch_clips(
            block, patient.eog_rate_hz, job.channel_policy, job.clip_seconds
        )
    block = frames[
        epoch_index * formats.PSM_FRAMES_PER_EPOCH
        : (epoch_index + 1) * formats.PSM_FRAMES_PER_EPOCH
    ]
    return preprocess.video_epoch_clips(block, clip_seconds=job.clip_seconds)


def run_export(job: ExportJob, backend) -> ExportSummary:
    """Export one modality for every epoch in the manifest."""
    job.validate()
    patients = formats.read_manifest(job.manifest_path)
    records = []
    skipped = []
    attempted = 0
    for patient in patients:
        samples = frames = None
        try:
            samples, wav_rate = formats.read_eog_wav(patient.eog_path)
            if wav_rate != patient.eog_rate_hz:
                raise FormatError(
                    f"{patient.eog_path}: WAV rate {wav_rate} != manifest "
                    f"{patient.eog_rate_hz}"
                )
            frames = formats.read_psm_stream(patient.psm_path)
            n_epochs = min(
                samples.shape[0] // (formats.EPOCH_SECONDS * patient.eog_rate_hz),
                frames.shape[0] // formats.PSM_FRAMES_PER_EPOCH,
                formats.count_labels(patient.labels_path),
            )
        except ExporterError as exc:
            raise FormatError(f"patient {patient.patient_id}: {exc}") from exc
        for epoch_index in range(n_epochs):
            attempted += 1
            try:
                clips = _epoch_clips(job, patient, samples, frames, epoch_index)
                vectors = backend.embed_clips(clips, job.modality)
                if vectors.shape != (clips.shape[0], backend.dim):
                    raise ExporterError(
                        f"backend returned shape {vectors.shape}, expected "
                        f"({clips.shape[0]}, {backend.dim})"
                    )
                pooled = vectors.mean(axis=0).astype(np.float32)
                records.append((patient.patient_id, epoch_index, pooled))
            except Exception as exc:  # record and continue; summary reports it
                logger.warning(
                    "skipping %s epoch %d: %s", patient.patient_id, epoch_index, exc
                )
                skipped.append((patient.patient_id, epoch_index, str(exc)))

    formats.write_sfeb(job.out_path, job.modality, backend.dim, records)
    summary = ExportSummary(
        out_path=job.out_path,
        modality=job.modality,
        dim=backend.dim,
        attempted=attempted,
        written=len(records),
        skipped=skipped,
    )
    meta = {
        "backend": getattr(backend, "name", type(backend).__name__),
        "window_policy": job.window_policy,
        "clip_seconds": job.clip_seconds,
        "channel_policy": job.channel_policy if job.modality == "eog_audio" else None,
        **summary.to_dict(),
    }
    Path(str(job.out_path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return summary
