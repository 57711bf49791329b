"""Event-aware visual-token compression pipeline on a deterministic toy transformer."""

__version__ = "0.1.0"
