"""Frequency-aware Gaussian-splatting talking heads on a synthetic benchmark."""
__version__ = "0.1.0"
