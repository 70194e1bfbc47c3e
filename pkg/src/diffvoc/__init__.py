"""Desk-scale diffusion vocoder laboratory with inference-aware fine-tuning."""

__version__ = "0.1.0"
