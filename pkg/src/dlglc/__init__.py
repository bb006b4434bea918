"""Self-supervised pseudo-label learning with a dynamic loss gate and label correction."""

__version__ = "0.1.0"
