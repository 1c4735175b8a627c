"""Readers for the cohort's on-disk formats and the SFEB writer.

These implement the classification pipeline's documented external
interfaces directly (the exporter does not link against the pipeline):

* manifest: JSON with ``schema_version`` and ``patients[]`` entries whose
  paths are relative to the manifest file;
* EOG: 2-channel 16-bit PCM WAV, raw ADC counts;
* PSM: flat little-endian float32 stream of 18x8 frames plus a ``.hdr``
  text sidecar (``rate_hz``, ``frame_count``, ``rows``, ``cols``);
* labels: one stage token per line (used only for epoch counting);
* SFEB: magic "SFEB", u32 version=1, u32 dim, u32 modality code
  (0 audio/EOG, 1 video/PSM), u64 record count, then per record a
  u16-length patient id, u32 epoch index, and dim float32 values.
"""

from __future__ import annotations

import json
import os
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sfeb_export.errors import FormatError

EPOCH_SECONDS = 30
PSM_ROWS = 18
PSM_COLS = 8
PSM_FRAMES_PER_EPOCH = 300  # 30 s at 10 Hz

SFEB_MAGIC = b"SFEB"
SFEB_VERSION = 1
SFEB_HEAD = struct.Struct("<4sIIIQ")
MODALITY_CODES = {"eog_audio": 0, "psm_video": 1}


@dataclass
class PatientFiles:
    patient_id: str
    eog_path: Path
    psm_path: Path
    labels_path: Path
    eog_rate_hz: int


def read_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "patients" not in doc:
        raise FormatError(f"{path}: not a cohort manifest")
    base = path.parent
    patients = []
    for entry in doc["patients"]:
        try:
            patients.append(
                PatientFiles(
                    patient_id=str(entry["patient_id"]),
                    eog_path=base / entry["eog_path"],
                    psm_path=base / entry["psm_path"],
                    labels_path=base / entry["labels_path"],
                    eog_rate_hz=int(entry["eog_rate_hz"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed patient entry {entry!r}") from exc
    return patients


def read_eog_wav(path) -> tuple:
    """Returns (samples as (n, 2) int16 array, rate_hz)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 2 or w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 2-channel 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, FileNotFoundError) as exc:
        raise FormatError(f"{path}: cannot read WAV ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").reshape(-1, 2)
    return samples, rate


def read_psm_stream(path) -> np.ndarray:
    """Returns frames as (n, 18, 8) float32."""
    header_path = Path(str(path) + ".hdr")
    if not header_path.is_file():
        raise FormatError(f"{path}: missing sidecar header")
    fields = dict(
        line.split("=", 1)
        for line in header_path.read_text().splitlines()
        if "=" in line
    )
    try:
        frame_count = int(fields["frame_count"])
        rows = int(fields.get("rows", PSM_ROWS))
        cols = int(fields.get("cols", PSM_COLS))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{header_path}: invalid header") from exc
    if (rows, cols) != (PSM_ROWS, PSM_COLS):
        raise FormatError(f"{path}: unsupported grid {rows}x{cols}")
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != frame_count * rows * cols:
        raise FormatError(f"{path}: payload does not match header frame count")
    return data.reshape(frame_count, rows, cols)


def count_labels(path) -> int:
    return sum(1 for line in Path(path).read_text().splitlines() if line.strip())


def epoch_count(patient: PatientFiles) -> int:
    """Complete 30 s epochs shared by all three streams (floor semantics)."""
    samples, rate = read_eog_wav(patient.eog_path)
    if rate != patient.eog_rate_hz:
        raise FormatError(
            f"{patient.eog_path}: WAV rate {rate} != manifest rate {patient.eog_rate_hz}"
        )
    frames = read_psm_stream(patient.psm_path)
    n_eog = samples.shape[0] // (EPOCH_SECONDS * rate)
    n_psm = frames.shape[0] // PSM_FRAMES_PER_EPOCH
    n_labels = count_labels(patient.labels_path)
    return min(n_eog, n_psm, n_labels)


def write_sfeb(path, modality: str, dim: int, records: list) -> None:
    """Atomically write (patient_id, epoch_index, vector) records."""
    if modality not in MODALITY_CODES:
        raise FormatError(f"unknown modality {modality!r}")
    chunks = [
        SFEB_HEAD.pack(SFEB_MAGIC, SFEB_VERSION, dim, MODALITY_CODES[modality], len(records))
    ]
    seen = set()
    for patient_id, epoch_index, values in records:
        key = (patient_id, epoch_index)
        if key in seen:
            raise FormatError(f"duplicate record {key}")
        seen.add(key)
        values = np.asarray(values, dtype="<f4")
        if values.shape != (dim,):
            raise FormatError(f"record {key} has shape {values.shape}, expected ({dim},)")
        pid = patient_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(pid)))
        chunks.append(pid)
        chunks.append(struct.pack("<I", epoch_index))
        chunks.append(values.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
