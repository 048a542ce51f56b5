"""Semantic multi-stream face deblurring with confidence-guided class losses."""

__version__ = "0.1.0"
