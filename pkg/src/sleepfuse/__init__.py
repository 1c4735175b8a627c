"""Multimodal sleep-stage classification pipeline.

Pressure-sensitive-mat (PSM) video and dual-channel EOG recordings are
normalized and segmented into 30 s epochs, turned into log-mel spectrograms
and frame clips, encoded into fixed-dimension embeddings, fused by
concatenation, and classified into five sleep-wake stages.  Includes a
minimal reverse-mode autodiff core, an AdamW trainer with a cosine schedule,
a patient-grouped five-fold evaluation harness, and a deterministic
synthetic-cohort generator for end-to-end testing.
"""

from sleepfuse.errors import ConfigError, DataError, InvariantError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "InvariantError",
    "TrainingError",
    "__version__",
]
