"""Inter-slice augmentation of medical image volumes by flow-based frame interpolation."""

__version__ = "0.1.0"
