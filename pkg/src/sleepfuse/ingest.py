"""Raw recording ingest: sensor normalization and 30 s epoch segmentation.

On-disk formats (also emitted by :mod:`sleepfuse.synthgen`):

* EOG: standard 2-channel 16-bit PCM WAV, samples are raw ADC counts in
  [-3000, 3000], left eye = channel 0, right eye = channel 1.
* PSM: flat binary stream of little-endian 32-bit floats, frame-major,
  each frame 18x8 row-major, plus a text sidecar header ``<path>.hdr``
  with ``key=value`` lines (``rate_hz``, ``frame_count``, ``rows``,
  ``cols``).
* Labels: one stage token per line (``Wake``, ``NREM1``, ``NREM2``,
  ``NREM3``, ``REM``).
* Manifest: JSON document with ``schema_version`` and a ``patients`` list.
"""

from __future__ import annotations

import enum
import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sleepfuse.errors import AlignmentError, DataError, FormatError

logger = logging.getLogger(__name__)

PSM_MAX_COUNT = 2046.0
EOG_MAX_COUNT = 3000.0
PSM_ROWS = 18
PSM_COLS = 8
PSM_RATE_HZ = 10
EPOCH_SECONDS = 30
EOG_RATES_HZ = (250, 512)
MANIFEST_SCHEMA_VERSION = 1


class SleepStage(enum.IntEnum):
    """Five-class sleep-wake label with canonical integer codes 0..4."""

    WAKE = 0
    NREM1 = 1
    NREM2 = 2
    NREM3 = 3
    REM = 4

    @property
    def token(self) -> str:
        return _STAGE_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "SleepStage":
        try:
            return _TOKEN_TO_STAGE[token]
        except KeyError:
            raise DataError(f"unknown sleep stage token {token!r}") from None


_STAGE_TOKENS = {
    SleepStage.WAKE: "Wake",
    SleepStage.NREM1: "NREM1",
    SleepStage.NREM2: "NREM2",
    SleepStage.NREM3: "NREM3",
    SleepStage.REM: "REM",
}
_TOKEN_TO_STAGE = {tok: st for st, tok in _STAGE_TOKENS.items()}

STAGE_COUNT = len(SleepStage)


@dataclass
class PatientRecording:
    """One night of raw, unnormalized sensor data plus stage labels."""

    patient_id: str
    eog_left: np.ndarray  # int counts in [-3000, 3000]
    eog_right: np.ndarray
    eog_rate_hz: int  # 250 or 512
    psm_frames: np.ndarray  # (n, 18, 8) counts in [0, 2046]
    labels: list  # SleepStage per consecutive 30 s window
    psm_rate_hz: int = PSM_RATE_HZ

    def validate(self) -> None:
        if self.eog_rate_hz not in EOG_RATES_HZ:
            raise DataError(
                f"patient {self.patient_id}: eog_rate_hz must be one of "
                f"{EOG_RATES_HZ}, got {self.eog_rate_hz}"
            )
        if len(self.eog_left) != len(self.eog_right):
            raise DataError(
                f"patient {self.patient_id}: EOG channels differ in length "
                f"({len(self.eog_left)} vs {len(self.eog_right)})"
            )
        if self.psm_frames.ndim != 3 or self.psm_frames.shape[1:] != (PSM_ROWS, PSM_COLS):
            raise DataError(
                f"patient {self.patient_id}: PSM frames must be (n, {PSM_ROWS}, "
                f"{PSM_COLS}), got {self.psm_frames.shape}"
            )
        for ch_name, ch in (("left", self.eog_left), ("right", self.eog_right)):
            bad = np.flatnonzero((ch < -EOG_MAX_COUNT) | (ch > EOG_MAX_COUNT))
            if bad.size:
                raise DataError(
                    f"patient {self.patient_id}: EOG {ch_name} sample {bad[0]} "
                    f"out of range [-3000, 3000]: {ch[bad[0]]}"
                )
        if self.psm_frames.size:
            lo = float(self.psm_frames.min())
            hi = float(self.psm_frames.max())
            if lo < 0.0 or hi > PSM_MAX_COUNT:
                frame_idx = int(
                    np.flatnonzero(
                        (self.psm_frames < 0.0) | (self.psm_frames > PSM_MAX_COUNT)
                    )[0]
                    // (PSM_ROWS * PSM_COLS)
                )
                raise DataError(
                    f"patient {self.patient_id}: PSM frame {frame_idx} has value "
                    f"outside [0, {PSM_MAX_COUNT:.0f}]"
                )


@dataclass
class EpochRecord:
    """One aligned 30 s unit: normalized PSM clip + EOG + stage label."""

    patient_id: str
    epoch_index: int
    psm_clip: np.ndarray  # (300, 18, 8) float32 in [0, 1]
    eog: np.ndarray  # (2, 30 * rate) float32 in [0, 1]
    native_eog_rate_hz: int
    label: SleepStage

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.epoch_index)


@dataclass
class ManifestEntry:
    patient_id: str
    eog_path: Path
    psm_path: Path
    labels_path: Path
    eog_rate_hz: int


@dataclass
class DatasetManifest:
    """Index of all patient files in a dataset directory."""

    patients: list = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != MANIFEST_SCHEMA_VERSION:
            raise FormatError(
                f"manifest schema_version {self.schema_version} not supported "
                f"(expected {MANIFEST_SCHEMA_VERSION})"
            )
        seen = set()
        for entry in self.patients:
            if entry.patient_id in seen:
                raise DataError(f"duplicate patient_id in manifest: {entry.patient_id}")
            seen.add(entry.patient_id)
            for path in (entry.eog_path, entry.psm_path, entry.labels_path):
                if not Path(path).is_file():
                    raise DataError(
                        f"patient {entry.patient_id}: missing file {path}"
                    )


# ---------------------------------------------------------------------------
# normalization


def normalize_psm_frame(raw: np.ndarray) -> np.ndarray:
    """Map one 18x8 frame of counts in [0, 2046] linearly onto [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (PSM_ROWS, PSM_COLS):
        raise DataError(
            f"PSM frame must be {PSM_ROWS}x{PSM_COLS}, got {raw.shape}"
        )
    bad = np.argwhere((raw < 0.0) | (raw > PSM_MAX_COUNT))
    if bad.size:
        r, c = bad[0]
        raise DataError(
            f"PSM value {raw[r, c]} at ({r}, {c}) outside [0, {PSM_MAX_COUNT:.0f}]"
        )
    return raw / PSM_MAX_COUNT


def normalize_eog_samples(raw: np.ndarray) -> np.ndarray:
    """Map EOG ADC counts in [-3000, 3000] linearly onto [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    bad = np.flatnonzero((raw < -EOG_MAX_COUNT) | (raw > EOG_MAX_COUNT))
    if bad.size:
        raise DataError(
            f"EOG sample {bad[0]} out of range [-3000, 3000]: {raw[bad[0]]}"
        )
    return (raw + EOG_MAX_COUNT) / (2.0 * EOG_MAX_COUNT)


# ---------------------------------------------------------------------------
# segmentation


def epoch_capacity(rec: PatientRecording) -> tuple:
    """Per-stream epoch counts (psm, eog, labels) under floor semantics."""
    psm_per_epoch = EPOCH_SECONDS * rec.psm_rate_hz
    eog_per_epoch = EPOCH_SECONDS * rec.eog_rate_hz
    return (
        rec.psm_frames.shape[0] // psm_per_epoch,
        len(rec.eog_left) // eog_per_epoch,
        len(rec.labels),
    )


def segment_epochs(rec: PatientRecording) -> list:
    """Cut a recording into non-overlapping, normalized 30 s epoch records.

    The epoch count is min() over the three streams; a trailing partial
    window is discarded.  Streams disagreeing by more than one epoch raise
    :class:`AlignmentError`.
    """
    rec.validate()
    n_psm, n_eog, n_lab = epoch_capacity(rec)
    n_epochs = min(n_psm, n_eog, n_lab)
    if max(n_psm, n_eog, n_lab) - n_epochs > 1:
        raise AlignmentError(
            f"patient {rec.patient_id}: stream lengths disagree beyond one "
            f"epoch (psm={n_psm}, eog={n_eog}, labels={n_lab} epochs)"
        )
    dropped = n_lab - n_epochs
    if dropped:
        logger.info(
            "patient %s: dropping %d labeled epoch(s) without full sensor data",
            rec.patient_id,
            dropped,
        )

    psm_per_epoch = EPOCH_SECONDS * rec.psm_rate_hz
    eog_per_epoch = EPOCH_SECONDS * rec.eog_rate_hz
    norm_left = normalize_eog_samples(rec.eog_left[: n_epochs * eog_per_epoch])
    norm_right = normalize_eog_samples(rec.eog_right[: n_epochs * eog_per_epoch])
    # range check already done by validate(); normalize the whole stream at once
    norm_psm = (
        rec.psm_frames[: n_epochs * psm_per_epoch].astype(np.float64) / PSM_MAX_COUNT
    ).astype(np.float32)

    epochs = []
    for i in range(n_epochs):
        f0 = i * psm_per_epoch
        clip = norm_psm[f0 : f0 + psm_per_epoch]
        s0 = i * eog_per_epoch
        eog = np.stack(
            [norm_left[s0 : s0 + eog_per_epoch], norm_right[s0 : s0 + eog_per_epoch]]
        ).astype(np.float32)
        epochs.append(
            EpochRecord(
                patient_id=rec.patient_id,
                epoch_index=i,
                psm_clip=clip,
                eog=eog,
                native_eog_rate_hz=rec.eog_rate_hz,
                label=rec.labels[i],
            )
        )
    return epochs


# ---------------------------------------------------------------------------
# file formats


def write_eog_wav(path, left: np.ndarray, right: np.ndarray, rate_hz: int) -> None:
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise DataError("EOG channels must have equal length")
    interleaved = np.empty(left.size * 2, dtype="<i2")
    interleaved[0::2] = left.astype("<i2")
    interleaved[1::2] = right.astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(rate_hz)
        w.writeframes(interleaved.tobytes())


def read_eog_wav(path) -> tuple:
    """Read a dual-channel 16-bit PCM WAV; returns (left, right, rate_hz)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 2:
                raise FormatError(f"{path}: expected 2 channels, got {w.getnchannels()}")
            if w.getsampwidth() != 2:
                raise FormatError(
                    f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit"
                )
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a valid WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2")
    return samples[0::2].astype(np.int32), samples[1::2].astype(np.int32), rate


def write_psm_stream(path, frames: np.ndarray, rate_hz: int = PSM_RATE_HZ) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 3 or frames.shape[1:] != (PSM_ROWS, PSM_COLS):
        raise DataError(f"PSM frames must be (n, {PSM_ROWS}, {PSM_COLS})")
    Path(path).write_bytes(frames.tobytes())
    header = (
        f"rate_hz={rate_hz}\n"
        f"frame_count={frames.shape[0]}\n"
        f"rows={PSM_ROWS}\n"
        f"cols={PSM_COLS}\n"
    )
    Path(str(path) + ".hdr").write_text(header)


def read_psm_stream(path) -> tuple:
    """Read a PSM binary stream + sidecar header; returns (frames, rate_hz)."""
    header_path = Path(str(path) + ".hdr")
    if not header_path.is_file():
        raise FormatError(f"{path}: missing sidecar header {header_path}")
    fields = {}
    for line in header_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{header_path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        rate_hz = int(fields["rate_hz"])
        frame_count = int(fields["frame_count"])
        rows = int(fields.get("rows", PSM_ROWS))
        cols = int(fields.get("cols", PSM_COLS))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{header_path}: incomplete or invalid header") from exc
    if (rows, cols) != (PSM_ROWS, PSM_COLS):
        raise FormatError(
            f"{path}: unsupported PSM grid {rows}x{cols} (expected "
            f"{PSM_ROWS}x{PSM_COLS})"
        )
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    expected = frame_count * rows * cols
    if data.size != expected:
        raise FormatError(
            f"{path}: has {data.size} values, header promises {expected}"
        )
    return data.reshape(frame_count, rows, cols).astype(np.float32), rate_hz


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(stage.token + "\n" for stage in labels))


def read_labels(path) -> list:
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        token = line.strip()
        if not token:
            continue
        try:
            labels.append(SleepStage.from_token(token))
        except DataError:
            raise FormatError(f"{path}:{lineno}: unknown stage token {token!r}") from None
    return labels


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "schema_version": manifest.schema_version,
        "patients": [
            {
                "patient_id": e.patient_id,
                "eog_path": str(e.eog_path),
                "psm_path": str(e.psm_path),
                "labels_path": str(e.labels_path),
                "eog_rate_hz": e.eog_rate_hz,
            }
            for e in manifest.patients
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise FormatError(f"{path}: not a dataset manifest")
    base = path.parent
    entries = []
    for rec in doc.get("patients", []):
        try:
            entries.append(
                ManifestEntry(
                    patient_id=str(rec["patient_id"]),
                    eog_path=base / rec["eog_path"],
                    psm_path=base / rec["psm_path"],
                    labels_path=base / rec["labels_path"],
                    eog_rate_hz=int(rec["eog_rate_hz"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed patient entry {rec!r}") from exc
    manifest = DatasetManifest(patients=entries, schema_version=int(doc["schema_version"]))
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# loading


def load_patient(entry: ManifestEntry) -> PatientRecording:
    try:
        left, right, wav_rate = read_eog_wav(entry.eog_path)
        frames, psm_rate = read_psm_stream(entry.psm_path)
        labels = read_labels(entry.labels_path)
    except DataError as exc:
        raise DataError(f"patient {entry.patient_id}: {exc}") from exc
    if wav_rate != entry.eog_rate_hz:
        raise DataError(
            f"patient {entry.patient_id}: WAV rate {wav_rate} Hz does not match "
            f"manifest eog_rate_hz {entry.eog_rate_hz}"
        )
    rec = PatientRecording(
        patient_id=entry.patient_id,
        eog_left=left,
        eog_right=right,
        eog_rate_hz=entry.eog_rate_hz,
        psm_frames=frames,
        labels=labels,
        psm_rate_hz=psm_rate,
    )
    rec.validate()
    return rec


def load_dataset(manifest: DatasetManifest) -> list:
    """Load every patient in the manifest; failures name the patient."""
    manifest.validate()
    return [load_patient(entry) for entry in manifest.patients]


@dataclass
class LoadReport:
    """Per-patient epoch and dropped-epoch counts from a full load."""

    epochs_per_patient: dict = field(default_factory=dict)
    dropped_per_patient: dict = field(default_factory=dict)

    @property
    def total_epochs(self) -> int:
        return sum(self.epochs_per_patient.values())

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped_per_patient.values())


def load_and_segment(manifest: DatasetManifest) -> tuple:
    """Load all patients and segment them; returns (epochs, LoadReport)."""
    report = LoadReport()
    all_epochs = []
    for rec in load_dataset(manifest):
        epochs = segment_epochs(rec)
        report.epochs_per_patient[rec.patient_id] = len(epochs)
        report.dropped_per_patient[rec.patient_id] = len(rec.labels) - len(epochs)
        all_epochs.extend(epochs)
    return all_epochs, report
