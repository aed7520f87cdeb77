"""Bird-call recognition pipeline: audio to spectrograms to a CNN to
recording-level ranked predictions."""

__version__ = "0.1.0"
