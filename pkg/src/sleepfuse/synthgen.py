"""Deterministic synthetic patient generator.

Signatures are frequency/energy caricatures, not physiological simulations:
each stage gets a distinct EOG band (with blink events and inter-channel
correlation knobs) and a PSM movement profile (burst rate, posture shifts).
The point is controllable separability for end-to-end tests, not realism.

The complementary profile makes wake-vs-sleep separable only through the
pressure mat (the wake EOG signature is a copy of NREM1's) and REM-vs-NREM
separable only through EOG (all non-wake PSM signatures are identical), so
fused-beats-unimodal checks are meaningful by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sleepfuse.errors import ConfigError, DataError
from sleepfuse.ingest import (
    DatasetManifest,
    EOG_MAX_COUNT,
    EPOCH_SECONDS,
    ManifestEntry,
    PatientRecording,
    PSM_MAX_COUNT,
    PSM_RATE_HZ,
    SleepStage,
    STAGE_COUNT,
    write_eog_wav,
    write_labels,
    write_manifest,
    write_psm_stream,
)

DEFAULT_RATE512_FRACTION = 11.0 / 85.0  # cohort mix mirroring the 74:11 split


@dataclass(frozen=True)
class EogSignature:
    """Per-stage EOG caricature: a dominant band plus event structure."""

    band_hz: tuple  # (low, high) dominant frequency band
    amplitude: float  # fraction of full scale
    channel_corr: float  # in [-1, 1]; negative = conjugate deflections
    blink_rate: float = 0.0  # expected blinks per 30 s epoch
    blink_amplitude: float = 0.0


@dataclass(frozen=True)
class PsmSignature:
    """Per-stage PSM caricature: movement bursts over a posture blob."""

    burst_rate: float  # expected movement bursts per epoch
    posture_shift_prob: float  # chance the posture changes at epoch start
    base_pressure: float  # blob peak as a fraction of full scale


@dataclass
class SynthProfile:
    eog: dict
    psm: dict
    noise_level: float = 0.3
    stage_prior: tuple = (0.10, 0.10, 0.45, 0.15, 0.20)  # NREM2-heavy skew
    self_weight: float = 0.55
    adjacent_weight: float = 0.30
    prior_weight: float = 0.15
    seed: int = 0

    def validate(self, eog_rate_hz: int) -> None:
        nyquist = eog_rate_hz / 2.0
        for stage in SleepStage:
            if stage not in self.eog or stage not in self.psm:
                raise ConfigError(f"profile missing signatures for {stage.token}")
            sig = self.eog[stage]
            if not 0.0 < sig.band_hz[0] < sig.band_hz[1] < nyquist:
                raise ConfigError(
                    f"{stage.token}: EOG band {sig.band_hz} invalid below "
                    f"Nyquist {nyquist} Hz"
                )
            if not 0.0 <= self.psm[stage].posture_shift_prob <= 1.0:
                raise ConfigError(f"{stage.token}: posture_shift_prob not in [0, 1]")
            if self.psm[stage].burst_rate < 0 or sig.blink_rate < 0:
                raise ConfigError(f"{stage.token}: event rates must be >= 0")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        if abs(sum(self.stage_prior) - 1.0) > 1e-9 or min(self.stage_prior) < 0:
            raise ConfigError("stage_prior must be a probability vector")

    def transition_matrix(self) -> np.ndarray:
        """First-order model biased toward adjacent-stage transitions."""
        prior = np.asarray(self.stage_prior, dtype=np.float64)
        t = np.zeros((STAGE_COUNT, STAGE_COUNT))
        for i in range(STAGE_COUNT):
            adjacency = np.zeros(STAGE_COUNT)
            for j in range(STAGE_COUNT):
                if abs(i - j) == 1:
                    adjacency[j] = 1.0
            adjacency /= adjacency.sum()
            t[i] = self.self_weight * np.eye(STAGE_COUNT)[i]
            t[i] += self.adjacent_weight * adjacency
            t[i] += self.prior_weight * prior
            t[i] /= t[i].sum()
        return t


def default_profile(noise_level: float = 0.3, seed: int = 0) -> SynthProfile:
    """Every stage separable through both modalities; bands do not overlap."""
    eog = {
        SleepStage.WAKE: EogSignature((15.0, 18.0), 0.30, 0.80, blink_rate=6.0, blink_amplitude=0.40),
        SleepStage.NREM1: EogSignature((7.0, 8.5), 0.25, 0.50),
        SleepStage.NREM2: EogSignature((4.0, 5.5), 0.28, 0.40),
        SleepStage.NREM3: EogSignature((0.7, 1.8), 0.42, 0.60),
        SleepStage.REM: EogSignature((10.0, 12.0), 0.32, -0.85),
    }
    psm = {
        SleepStage.WAKE: PsmSignature(4.0, 0.20, 0.72),
        SleepStage.NREM1: PsmSignature(1.0, 0.05, 0.62),
        SleepStage.NREM2: PsmSignature(0.4, 0.02, 0.55),
        SleepStage.NREM3: PsmSignature(0.1, 0.01, 0.50),
        SleepStage.REM: PsmSignature(0.15, 0.02, 0.58),
    }
    return SynthProfile(eog=eog, psm=psm, noise_level=noise_level, seed=seed)


def complementary_profile(noise_level: float = 0.1, seed: int = 0) -> SynthProfile:
    """Wake-vs-sleep carried only by PSM; REM-vs-NREM carried only by EOG."""
    nrem1_eog = EogSignature((7.0, 8.5), 0.25, 0.50)
    sleep_psm = PsmSignature(0.2, 0.02, 0.55)
    eog = {
        SleepStage.WAKE: nrem1_eog,  # EOG cannot tell Wake from NREM1
        SleepStage.NREM1: nrem1_eog,
        SleepStage.NREM2: EogSignature((4.0, 5.5), 0.28, 0.40),
        SleepStage.NREM3: EogSignature((0.7, 1.8), 0.42, 0.60),
        SleepStage.REM: EogSignature((10.0, 12.0), 0.32, -0.85),
    }
    psm = {
        SleepStage.WAKE: PsmSignature(12.0, 0.25, 0.80),  # near-continuous fidgeting
        SleepStage.NREM1: sleep_psm,  # PSM cannot tell sleep stages apart
        SleepStage.NREM2: sleep_psm,
        SleepStage.NREM3: sleep_psm,
        SleepStage.REM: sleep_psm,
    }
    # flatter transitions than the default profile so every stage keeps
    # enough support for the directional fused-vs-unimodal comparison
    return SynthProfile(
        eog=eog,
        psm=psm,
        noise_level=noise_level,
        stage_prior=(0.2, 0.2, 0.2, 0.2, 0.2),
        self_weight=0.30,
        adjacent_weight=0.15,
        prior_weight=0.55,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# per-epoch synthesis


def _synth_eog_epoch(
    sig: EogSignature, rate_hz: int, noise_level: float, rng: np.random.Generator
) -> tuple:
    n = EPOCH_SECONDS * rate_hz
    t = np.arange(n, dtype=np.float64) / rate_hz
    freq = rng.uniform(*sig.band_hz)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    core = np.sin(2.0 * np.pi * freq * t + phase)
    freq_alt = rng.uniform(*sig.band_hz)
    phase_alt = rng.uniform(0.0, 2.0 * np.pi)
    alt = np.sin(2.0 * np.pi * freq_alt * t + phase_alt)
    corr = sig.channel_corr
    left = sig.amplitude * core
    right = sig.amplitude * (corr * core + math.sqrt(max(0.0, 1.0 - corr**2)) * alt)

    n_blinks = rng.poisson(sig.blink_rate) if sig.blink_rate > 0 else 0
    for _ in range(n_blinks):
        center = rng.uniform(0.0, EPOCH_SECONDS)
        width = rng.uniform(0.15, 0.35)
        bump = sig.blink_amplitude * np.exp(-0.5 * ((t - center) / width) ** 2)
        left += bump
        right += bump

    sigma = 0.15 * noise_level
    if sigma > 0:
        left = left + sigma * rng.standard_normal(n)
        right = right + sigma * rng.standard_normal(n)
    counts_l = np.clip(np.rint(left * EOG_MAX_COUNT), -EOG_MAX_COUNT, EOG_MAX_COUNT)
    counts_r = np.clip(np.rint(right * EOG_MAX_COUNT), -EOG_MAX_COUNT, EOG_MAX_COUNT)
    return counts_l.astype(np.int32), counts_r.astype(np.int32)


@dataclass
class _Posture:
    center_row: float
    center_col: float
    sigma_row: float
    sigma_col: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "_Posture":
        return cls(
            center_row=rng.uniform(5.0, 13.0),
            center_col=rng.uniform(2.5, 4.5),
            sigma_row=rng.uniform(3.0, 5.0),
            sigma_col=rng.uniform(1.2, 2.2),
        )


def _synth_psm_epoch(
    sig: PsmSignature,
    posture: _Posture,
    noise_level: float,
    rng: np.random.Generator,
) -> np.ndarray:
    n_frames = EPOCH_SECONDS * PSM_RATE_HZ
    rows = np.arange(18, dtype=np.float64)
    cols = np.arange(8, dtype=np.float64)
    frame_t = np.arange(n_frames, dtype=np.float64) / PSM_RATE_HZ

    # breathing-like slow wobble plus movement bursts
    amp = np.full(n_frames, sig.base_pressure)
    amp *= 1.0 + 0.02 * np.sin(2.0 * np.pi * 0.25 * frame_t + rng.uniform(0, 2 * np.pi))
    dr = np.zeros(n_frames)
    dc = np.zeros(n_frames)
    n_bursts = rng.poisson(sig.burst_rate) if sig.burst_rate > 0 else 0
    for _ in range(n_bursts):
        duration = int(rng.integers(5, 21))
        start = int(rng.integers(0, max(1, n_frames - duration)))
        jitter_r = rng.uniform(-2.0, 2.0)
        jitter_c = rng.uniform(-1.2, 1.2)
        envelope = np.sin(np.linspace(0.0, np.pi, duration))
        dr[start : start + duration] += jitter_r * envelope
        dc[start : start + duration] += jitter_c * envelope
        amp[start : start + duration] *= 1.0 + 0.35 * envelope

    row_term = np.exp(
        -0.5 * ((rows[None, :] - (posture.center_row + dr)[:, None]) / posture.sigma_row) ** 2
    )
    col_term = np.exp(
        -0.5 * ((cols[None, :] - (posture.center_col + dc)[:, None]) / posture.sigma_col) ** 2
    )
    frames = amp[:, None, None] * row_term[:, :, None] * col_term[:, None, :]
    frames *= PSM_MAX_COUNT
    if noise_level > 0:
        frames = frames + 8.0 * noise_level * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, PSM_MAX_COUNT).astype(np.float32)


# ---------------------------------------------------------------------------
# patient and cohort generation


def draw_stage_sequence(
    profile: SynthProfile, n_epochs: int, rng: np.random.Generator
) -> list:
    transition = profile.transition_matrix()
    prior = np.asarray(profile.stage_prior)
    stages = [SleepStage(int(rng.choice(STAGE_COUNT, p=prior)))]
    for _ in range(n_epochs - 1):
        row = transition[int(stages[-1])]
        stages.append(SleepStage(int(rng.choice(STAGE_COUNT, p=row))))
    return stages


def generate_patient(
    profile: SynthProfile,
    n_epochs: int,
    stage_sequence: list | None = None,
    patient_id: str = "synth000",
    eog_rate_hz: int = 250,
    rng: np.random.Generator | None = None,
) -> PatientRecording:
    """Synthesize one patient; the output satisfies every ingest invariant."""
    if n_epochs < 1:
        raise ConfigError(f"n_epochs must be >= 1, got {n_epochs}")
    profile.validate(eog_rate_hz)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence((profile.seed,)))
    if stage_sequence is None:
        stage_sequence = draw_stage_sequence(profile, n_epochs, rng)
    if len(stage_sequence) != n_epochs:
        raise DataError(
            f"stage sequence length {len(stage_sequence)} != n_epochs {n_epochs}"
        )

    posture = _Posture.sample(rng)
    left_parts = []
    right_parts = []
    psm_parts = []
    for stage in stage_sequence:
        stage = SleepStage(stage)
        if rng.uniform() < profile.psm[stage].posture_shift_prob:
            posture = _Posture.sample(rng)
        l, r = _synth_eog_epoch(profile.eog[stage], eog_rate_hz, profile.noise_level, rng)
        left_parts.append(l)
        right_parts.append(r)
        psm_parts.append(
            _synth_psm_epoch(profile.psm[stage], posture, profile.noise_level, rng)
        )

    rec = PatientRecording(
        patient_id=patient_id,
        eog_left=np.concatenate(left_parts),
        eog_right=np.concatenate(right_parts),
        eog_rate_hz=eog_rate_hz,
        psm_frames=np.concatenate(psm_parts, axis=0),
        labels=[SleepStage(s) for s in stage_sequence],
    )
    rec.validate()
    return rec


def generate_cohort(
    n_patients: int,
    base_profile: SynthProfile,
    seed: int,
    out_dir,
    epochs_per_patient: int = 780,
    rate512_fraction: float = DEFAULT_RATE512_FRACTION,
) -> Path:
    """Write a mixed-rate cohort in the ingest formats; returns the manifest
    path.  Per-patient randomness is derived from (seed, patient index)."""
    if n_patients < 1:
        raise ConfigError(f"n_patients must be >= 1, got {n_patients}")
    if not 0.0 <= rate512_fraction <= 1.0:
        raise ConfigError("rate512_fraction must lie in [0, 1]")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    n_512 = round(n_patients * rate512_fraction)
    entries = []
    for i in range(n_patients):
        rate = 512 if i >= n_patients - n_512 else 250
        patient_id = f"synth{i:03d}"
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        rec = generate_patient(
            base_profile,
            epochs_per_patient,
            patient_id=patient_id,
            eog_rate_hz=rate,
            rng=rng,
        )
        eog_path = out_dir / f"{patient_id}.wav"
        psm_path = out_dir / f"{patient_id}.psm"
        labels_path = out_dir / f"{patient_id}.labels"
        write_eog_wav(eog_path, rec.eog_left, rec.eog_right, rate)
        write_psm_stream(psm_path, rec.psm_frames)
        write_labels(labels_path, rec.labels)
        entries.append(
            ManifestEntry(
                patient_id=patient_id,
                eog_path=eog_path.name,
                psm_path=psm_path.name,
                labels_path=labels_path.name,
                eog_rate_hz=rate,
            )
        )
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, DatasetManifest(patients=entries))
    return manifest_path
