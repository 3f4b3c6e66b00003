"""Post-training quantization engine for a miniature promptable segmenter."""

__version__ = "0.1.0"
