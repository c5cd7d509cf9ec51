"""Trajectory similarity learning with a sub-view convolutional encoder,
a rotary-attention block, and a kNN-guided ranking loss."""

__version__ = "0.1.0"
