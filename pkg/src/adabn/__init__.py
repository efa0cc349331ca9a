"""Batch normalization and AdaBN domain adaptation on a small numpy network library."""

__version__ = "0.1.0"
