"""Two-level coarse-to-fine image classification with from-scratch CNNs and CRBMs."""

__version__ = "0.1.0"
