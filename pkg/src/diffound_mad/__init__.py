"""Differential morphing attack detection with LoRA-adapted dual-stream encoders."""

__version__ = "0.1.0"
