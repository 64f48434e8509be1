"""Learned transform compression with soft vector quantization."""

from softvq.estimator import SoftVQCodec

__version__ = "0.1.0"

__all__ = ["SoftVQCodec", "__version__"]
