"""Hadamard-product linear attention with a recurrent stereo pipeline."""

__version__ = "0.1.0"
