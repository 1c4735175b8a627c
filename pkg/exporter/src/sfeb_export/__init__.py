"""Boundary adapter: PSM/EOG cohorts -> pre-trained multimodal embeddings.

Reads the pipeline's on-disk cohort formats (manifest JSON, dual-channel
WAV EOG, flat-binary PSM streams), runs every 30 s epoch through an
embedding backend (the released ImageBind weights, or a deterministic stub
for contract testing), and writes per-modality SFEB exchange files the
classification pipeline consumes.
"""

from sfeb_export.errors import ExporterError, FormatError, WeightsUnavailableError
from sfeb_export.export import ExportJob, ExportSummary, run_export

__version__ = "0.1.0"

__all__ = [
    "ExportJob",
    "ExportSummary",
    "ExporterError",
    "FormatError",
    "WeightsUnavailableError",
    "run_export",
]
