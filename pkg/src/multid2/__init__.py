"""Multi-D2 coherent-state dynamics with basis-function apoptosis."""

__version__ = "0.1.0"
