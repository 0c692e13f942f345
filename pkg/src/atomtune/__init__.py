"""Filter-atom decomposition and atom-only fine-tuning for small ConvNets."""

__version__ = "0.1.0"
