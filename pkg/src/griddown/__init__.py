"""Wind-downscaling toolkit for misaligned forecast grids."""

__version__ = "0.1.0"
