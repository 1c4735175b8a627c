import numpy as np
import pytest

from sleepfuse import ingest, synthgen
from sleepfuse.dsp import MelConfig
from sleepfuse.encoders import EncoderConfig

# desk-scale configuration used across tests; the paper-scale defaults are
# exercised separately where a contract pins them
DESK_MEL = dict(
    target_rate_hz=200,
    n_mels=24,
    window_length_s=0.5,
    hop_length_s=0.25,
    f_max_hz=100.0,
)
DESK_ENCODER = dict(
    model_dim=16,
    head_count=2,
    block_count=1,
    embedding_dim=16,
    audio_patch_frames=17,
    video_frame_stride=10,
)


@pytest.fixture
def desk_mel_cfg():
    return MelConfig(**DESK_MEL)


@pytest.fixture
def desk_encoder_cfg():
    return EncoderConfig(**DESK_ENCODER)


def make_recording(n_epochs=4, rate=250, seed=0, noise=0.3, profile=None, patient_id="p0"):
    if profile is None:
        profile = synthgen.default_profile(noise_level=noise, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 99)))
    return synthgen.generate_patient(
        profile, n_epochs, patient_id=patient_id, eog_rate_hz=rate, rng=rng
    )


def make_epochs(n_patients=3, n_epochs=6, seed=0, noise=0.3, profile=None, rates=None):
    """Small multi-patient epoch list for training tests."""
    epochs = []
    for i in range(n_patients):
        rate = rates[i] if rates else (512 if i == n_patients - 1 else 250)
        rec = make_recording(
            n_epochs=n_epochs,
            rate=rate,
            seed=seed + i,
            noise=noise,
            profile=profile,
            patient_id=f"p{i:02d}",
        )
        epochs.extend(ingest.segment_epochs(rec))
    return epochs
