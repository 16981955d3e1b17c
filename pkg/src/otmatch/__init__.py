"""Semi-supervised learning with an optimal-transport consistency loss."""
__version__ = "0.1.0"
