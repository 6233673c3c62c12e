"""Positional-attention Transformers, a parallel-computation simulator and a compiler between them."""

__version__ = "0.1.0"
