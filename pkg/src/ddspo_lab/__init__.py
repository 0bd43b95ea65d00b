"""Score-space preference optimization on a 2D conditional diffusion toy."""

__version__ = "0.1.0"
