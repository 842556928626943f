"""Neural video codec with continuous, pixel-granular local rate control."""

__version__ = "0.1.0"
