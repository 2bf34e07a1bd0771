"""A Memory, Attention and Composition network with its own autodiff engine."""

__version__ = "0.1.0"
