"""Multi-modal continual learning with cross-modality mixture-of-experts adapters."""

__version__ = "0.1.0"
