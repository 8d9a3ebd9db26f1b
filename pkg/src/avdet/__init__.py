"""Self-supervised object detection from audio-visual correspondence, at desk scale."""

__version__ = "0.1.0"
