"""Two-layer clothed avatar pipeline: synthetic capture, registration,
inverse rendering, decoders, texture alignment, and animation."""

__version__ = "0.1.0"
