"""Multi-modal fusion object detection with laser ranging and spoken alerts."""

__version__ = "0.1.0"
