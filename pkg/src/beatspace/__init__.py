"""beatspace: label-free ECG heartbeat embedding, evaluation, and clustering."""

__version__ = "0.1.0"
