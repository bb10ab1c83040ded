"""Video raindrop removal: single-image restoration plus multi-frame refinement."""

__version__ = "0.1.0"
