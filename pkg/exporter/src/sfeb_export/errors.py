class ExporterError(Exception):
    """Base class for exporter failures."""


class FormatError(ExporterError):
    """An input file does not match its documented layout."""


class WeightsUnavailableError(ExporterError):
    """The pre-trained model weights or runtime are not available."""
