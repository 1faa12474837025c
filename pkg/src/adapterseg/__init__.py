"""Task adapters for a frozen hierarchical segmentation encoder."""

__version__ = "0.1.0"
