"""Structure-aware convolutional decoding workbench for CSS codes."""

__version__ = "0.1.0"
