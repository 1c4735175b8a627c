import pytest

# the primary package is a test-only dependency: it generates ingest-format
# cohorts and acts as the round-trip oracle for the exchange files
from sleepfuse import synthgen


@pytest.fixture
def tiny_cohort(tmp_path):
    profile = synthgen.default_profile(noise_level=0.2, seed=31)
    manifest = synthgen.generate_cohort(
        2, profile, seed=31, out_dir=tmp_path / "cohort", epochs_per_patient=3
    )
    return manifest
