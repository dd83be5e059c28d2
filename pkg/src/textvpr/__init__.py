"""Toy transformer scene-text spotter with text-based place recognition."""

__version__ = "0.1.0"
