"""Few-shot semi-supervised image classification with class-conditioned translation."""

__version__ = "0.1.0"
